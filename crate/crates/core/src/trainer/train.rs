use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{bucket_batches, Batch, Utterance};
use crate::error::{Error, Result, TensorError};
use crate::losses::{min_frames, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::params::{Gradients, ParamStore};

use super::{evaluate, HistoryRow, HistoryWriter, Optimizer, OptimizerConfig, RouteStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Upper bound on padded frames per batch.
    pub batch_frames: usize,
    pub epochs: usize,
    /// Stops early after this many updates.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Validation runs every this many updates and once at the end.
    pub eval_every: u64,
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup length in updates.
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_frames: 400,
            epochs: 10,
            max_steps: None,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 50,
            clip_norm: Some(5.0),
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.batch_frames == 0 {
            return Err(Error::Config("batch_frames must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss, gradient or parameter appeared at this update; the
    /// returned model holds the parameters from just before it.
    Diverged { step: u64 },
}

/// Receives each validation record as it is produced.
pub trait TrainObserver {
    /// `best` is set when this evaluation improved on the best validation
    /// CTC loss so far.
    fn on_eval(&mut self, row: &HistoryRow, stats: &RouteStats, best: Option<&Model>) -> Result<()>;
}

impl TrainObserver for () {
    fn on_eval(&mut self, _: &HistoryRow, _: &RouteStats, _: Option<&Model>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for HistoryWriter {
    fn on_eval(&mut self, row: &HistoryRow, stats: &RouteStats, _: Option<&Model>) -> Result<()> {
        self.append(row, stats)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final (or last finite) parameters.
    pub model: Model,
    /// Parameters with the lowest validation CTC loss.
    pub best: Model,
    pub best_valid_ctc: f64,
    pub history: Vec<HistoryRow>,
    pub route_stats: Vec<(u64, RouteStats)>,
    pub steps: u64,
    /// Training utterances dropped because their target does not fit.
    pub skipped: usize,
    pub status: TrainStatus,
}

#[derive(Default)]
struct Running {
    batches: usize,
    total: f64,
    ctc: f64,
    l1: Option<f64>,
    imp: Option<f64>,
    balance: Option<f64>,
    emb: Option<f64>,
}

impl Running {
    fn add(&mut self, b: &LossBreakdown) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        self.batches += 1;
        self.total += b.total;
        self.ctc += b.recognition;
        acc(&mut self.l1, b.sparsity);
        acc(&mut self.imp, b.importance);
        acc(&mut self.balance, b.balancing);
        acc(&mut self.emb, b.embedding);
    }

    fn row(&self, step: u64, valid_ctc: f64, valid_ter: f64) -> HistoryRow {
        let n = self.batches.max(1) as f64;
        let avg = |v: Option<f64>| v.map(|v| v / n);
        HistoryRow {
            step,
            train_total: self.total / n,
            train_ctc: self.ctc / n,
            train_l1: avg(self.l1),
            train_imp: avg(self.imp),
            train_balance: avg(self.balance),
            train_emb: avg(self.emb),
            valid_ctc,
            valid_ter,
        }
    }
}

struct Tracker<'a> {
    valid: &'a [Utterance],
    observer: &'a mut dyn TrainObserver,
    history: Vec<HistoryRow>,
    route_stats: Vec<(u64, RouteStats)>,
    best: Option<(f64, Model)>,
}

impl Tracker<'_> {
    fn validate(&mut self, model: &Model, step: u64, running: &mut Running) -> Result<()> {
        let report = evaluate(model, self.valid)?;
        let row = running.row(step, report.ctc, report.ter);
        *running = Running::default();
        info!(
            "step {step}: train {:.4} valid ctc {:.4} ter {:.4}",
            row.train_total, row.valid_ctc, row.valid_ter
        );
        let improved = self.best.as_ref().map_or(true, |(b, _)| report.ctc < *b);
        if improved {
            self.best = Some((report.ctc, model.clone()));
        }
        let best = self.best.as_ref().filter(|_| improved).map(|(_, m)| m);
        self.observer.on_eval(&row, &report.route_stats, best)?;
        self.history.push(row);
        self.route_stats.push((step, report.route_stats));
        Ok(())
    }
}

/// `None` when the loss or any gradient is not finite.
fn loss_and_gradients(model: &Model, batch: &Batch, weights: &LossWeights) -> Result<Option<(LossBreakdown, Gradients)>> {
    let mut sess = model.session();
    let loss = match model.loss(&mut sess, batch, weights) {
        Err(Error::Tensor(TensorError::NonFinite { .. })) => return Ok(None),
        other => other?,
    };
    if !loss.breakdown.total.is_finite() {
        return Ok(None);
    }
    sess.graph.backward(loss.total)?;
    let grads = sess.gradients();
    Ok(grads.all_finite().then_some((loss.breakdown, grads)))
}

/// Trains `model` on `train`, validating on `valid`. Deterministic for a
/// fixed configuration, seed and corpus.
pub fn train(
    mut model: Model,
    train: &[Utterance],
    valid: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Contract("training and validation corpora must be non-empty".into()));
    }
    for u in train.iter().chain(valid) {
        if u.dim() != model.config.input_dim {
            return Err(Error::Contract(format!(
                "utterance {} has width {}, model expects {}",
                u.id,
                u.dim(),
                model.config.input_dim
            )));
        }
        u.validate(model.config.vocab)?;
    }
    let usable: Vec<&Utterance> = train
        .iter()
        .filter(|u| {
            let ok = u.frames() >= min_frames(&u.labels);
            if !ok {
                warn!(
                    "skipping {}: {} frames cannot hold a {}-label target",
                    u.id,
                    u.frames(),
                    u.labels.len()
                );
            }
            ok
        })
        .collect();
    let skipped = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Contract("no training utterance is long enough for its target".into()));
    }
    let owned: Vec<Utterance> = usable.into_iter().cloned().collect();

    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut step = 0u64;
    let mut running = Running::default();
    let mut tracker = Tracker {
        valid,
        observer,
        history: Vec::new(),
        route_stats: Vec::new(),
        best: None,
    };
    let mut status = TrainStatus::Completed;
    // parameters before the latest update, restored if that update leads to
    // a non-finite loss
    let mut previous: Option<ParamStore> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let batches = bucket_batches(&owned, cfg.batch_frames, cfg.seed.wrapping_add(epoch as u64));
        for indices in batches {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let utts: Vec<&Utterance> = indices.iter().map(|&i| &owned[i]).collect();
            let batch = Batch::from_utterances(&utts)?;
            let Some((breakdown, mut grads)) = loss_and_gradients(&model, &batch, &cfg.weights)? else {
                if let Some(p) = previous.take() {
                    model.params = p;
                }
                status = TrainStatus::Diverged { step: step + 1 };
                break 'epochs;
            };
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            let lr_scale = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let before = model.params.clone();
            opt.step(&mut model.params, &grads, lr_scale);
            if !model.params.iter().all(|p| p.value.all_finite()) {
                model.params = before;
                status = TrainStatus::Diverged { step: step + 1 };
                break 'epochs;
            }
            previous = Some(before);
            step += 1;
            running.add(&breakdown);
            if step % cfg.eval_every == 0 {
                tracker.validate(&model, step, &mut running)?;
            }
        }
    }
    let diverged = matches!(status, TrainStatus::Diverged { .. });
    if tracker.history.is_empty() || (running.batches > 0 && !diverged) {
        tracker.validate(&model, step, &mut running)?;
    }
    if let TrainStatus::Diverged { step } = status {
        warn!("training diverged at update {step}; keeping the last finite parameters");
    }
    let (best_valid_ctc, best) = tracker.best.expect("at least one validation pass");
    Ok(TrainOutcome {
        model,
        best,
        best_valid_ctc,
        history: tracker.history,
        route_stats: tracker.route_stats,
        steps: step,
        skipped,
        status,
    })
}
