use crate::autodiff::Var;
use crate::data::Batch;
use crate::error::{Error, Result, TensorError};
use crate::layers::{
    EmbeddingNet, ExpertFfn, Linear, MemoryBlock, MoeLayer, MultiHeadAttention, RouterRecord, Routing,
};
use crate::losses::{
    balancing_loss, combine, ctc_loss, mean_importance_loss, min_frames, sparsity_l1_loss, CtcLoss,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;

use super::ModelConfig;

/// Feed-forward half of a backbone layer.
#[derive(Debug, Clone)]
pub enum FeedForward {
    Static(ExpertFfn),
    Routed(MoeLayer),
}

#[derive(Debug, Clone)]
pub struct BackboneLayer {
    pub ffn: FeedForward,
    pub memory: MemoryBlock,
    pub attention: Option<MultiHeadAttention>,
}

/// A built acoustic model: its configuration, seed and parameters, plus the
/// layer handles indexing into the parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub input: Linear,
    pub layers: Vec<BackboneLayer>,
    pub embedding: Option<EmbeddingNet>,
    pub output: Linear,
}

/// Graph nodes produced for one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceOutput {
    pub logits: Var,
    /// One entry per backbone layer.
    pub routings: Vec<Routing>,
    pub embedding_logits: Option<Var>,
}

/// Graph nodes produced for a batch. Routings are concatenated over the
/// utterances, in batch order, so each covers every real frame of the batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Var>,
    pub routings: Vec<Routing>,
    pub embedding_logits: Vec<Var>,
}

impl ForwardOutput {
    pub fn records(&self) -> Vec<RouterRecord> {
        self.routings.iter().map(|r| r.record.clone()).collect()
    }
}

/// A differentiable batch objective and what went into it.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub routings: Vec<Routing>,
    /// Batch indices left out because their target needs more frames than
    /// they have.
    pub skipped: Vec<usize>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, &init, "input", c.input_dim, c.d, false)?;
        let embedding = if c.has_embedding() {
            Some(EmbeddingNet::new(
                &mut store,
                &init,
                "embedding",
                c.d,
                c.h_ffn,
                c.embedding_depth,
                c.attention_every,
                c.heads,
                c.memory,
                c.vocab,
            )?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(c.moe_layers);
        for l in 0..c.moe_layers {
            let name = format!("backbone.layer{l}");
            let ffn = if c.n_experts == 1 {
                FeedForward::Static(ExpertFfn::new(&mut store, &init, &format!("{name}.ffn"), c.d, c.h_ffn)?)
            } else {
                FeedForward::Routed(MoeLayer::new(
                    &mut store,
                    &init,
                    &format!("{name}.moe"),
                    c.d,
                    c.h_ffn,
                    c.n_experts,
                    c.router_mode,
                )?)
            };
            let memory = MemoryBlock::new(&mut store, &format!("{name}.memory"), c.d, c.memory)?;
            let attention = if c.attention_every > 0 && (l + 1) % c.attention_every == 0 {
                Some(MultiHeadAttention::new(&mut store, &init, &format!("{name}.attention"), c.d, c.heads)?)
            } else {
                None
            };
            layers.push(BackboneLayer { ffn, memory, attention });
        }
        let output = Linear::new(&mut store, &init, "output", c.d, c.vocab, true)?;
        Ok(Model {
            config,
            seed,
            params: store,
            input,
            layers,
            embedding,
            output,
        })
    }

    /// Rebuilds the architecture and loads `params` into it.
    pub fn from_parts(config: ModelConfig, seed: u64, params: &ParamStore) -> Result<Self> {
        let mut model = Model::build(config, seed)?;
        model.params.copy_from(params)?;
        Ok(model)
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }

    /// Runs one unpadded `T × input_dim` utterance.
    pub fn forward_utterance(&self, sess: &mut Session, x: Var) -> Result<UtteranceOutput> {
        let shape = sess.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(TensorError::Shape {
                op: "model input",
                lhs: shape,
                rhs: vec![0, self.config.input_dim],
            }
            .into());
        }
        let frames = shape[0];
        let mut o = self.input.forward(sess, x)?;
        let (embedding, embedding_logits) = match &self.embedding {
            Some(net) => {
                let (e, logits) = net.forward(sess, o)?;
                (Some(e), Some(logits))
            }
            None => (None, None),
        };
        let mut routings = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, routing) = match &layer.ffn {
                FeedForward::Static(ffn) => {
                    let y = ffn.forward(sess, o)?;
                    sess.count_expert_frames(frames);
                    let ones = Tensor::full(&[frames, 1], 1.0);
                    let record = RouterRecord::from_probs(ones.clone())?;
                    let probs = sess.input(ones);
                    (y, Routing { probs, record })
                }
                FeedForward::Routed(moe) => moe.forward(sess, o, embedding)?,
            };
            o = sess.graph.add(o, y)?;
            o = layer.memory.forward(sess, o)?;
            if let Some(att) = &layer.attention {
                let y = att.forward(sess, o)?;
                o = sess.graph.add(o, y)?;
            }
            routings.push(routing);
        }
        let logits = self.output.forward(sess, o)?;
        Ok(UtteranceOutput {
            logits,
            routings,
            embedding_logits,
        })
    }

    /// Runs every utterance of the batch at its own length, so padding frames
    /// never enter the graph.
    pub fn forward(&self, sess: &mut Session, batch: &Batch) -> Result<ForwardOutput> {
        if batch.dim() != self.config.input_dim {
            return Err(TensorError::Shape {
                op: "model input",
                lhs: batch.features.shape().to_vec(),
                rhs: vec![0, 0, self.config.input_dim],
            }
            .into());
        }
        let mut out = ForwardOutput {
            logits: Vec::with_capacity(batch.len()),
            routings: Vec::new(),
            embedding_logits: Vec::new(),
        };
        let mut per_layer: Vec<Vec<Routing>> = vec![Vec::with_capacity(batch.len()); self.layers.len()];
        for b in 0..batch.len() {
            let x = sess.input(batch.utterance(b));
            let u = self.forward_utterance(sess, x)?;
            out.logits.push(u.logits);
            out.embedding_logits.extend(u.embedding_logits);
            for (acc, r) in per_layer.iter_mut().zip(u.routings) {
                acc.push(r);
            }
        }
        for parts in per_layer {
            out.routings.push(concat_routings(sess, parts)?);
        }
        Ok(out)
    }

    /// The weighted training objective of a batch: mean CTC over utterances,
    /// auxiliary routing terms over all real frames, and the embedding
    /// network's mean CTC when present.
    pub fn loss(&self, sess: &mut Session, batch: &Batch, weights: &LossWeights) -> Result<BatchLoss> {
        weights.validate()?;
        let (keep, skipped): (Vec<usize>, Vec<usize>) =
            (0..batch.len()).partition(|&b| batch.lengths[b] >= min_frames(&batch.labels[b]));
        if keep.is_empty() {
            return Err(Error::Contract(
                "no utterance in the batch has enough frames for its target".into(),
            ));
        }
        let batch = if skipped.is_empty() {
            std::borrow::Cow::Borrowed(batch)
        } else {
            std::borrow::Cow::Owned(batch.select(&keep)?)
        };
        let out = self.forward(sess, &batch)?;
        let blank = self.config.blank();
        let recognition = mean_ctc(sess, &out.logits, &batch.labels, blank)?;
        let embedding = if out.embedding_logits.is_empty() {
            None
        } else {
            Some(mean_ctc(sess, &out.embedding_logits, &batch.labels, blank)?)
        };
        let agg = self.config.aux_aggregation;
        let g = &mut sess.graph;
        let (sparsity, importance, balancing) = if out.routings.is_empty() {
            (None, None, None)
        } else {
            (
                Some(sparsity_l1_loss(g, &out.routings, agg)?),
                Some(mean_importance_loss(g, &out.routings, agg)?),
                Some(balancing_loss(g, &out.routings, agg)?),
            )
        };
        let terms = LossTerms {
            recognition,
            sparsity,
            importance,
            balancing,
            embedding,
        };
        let mode = if out.routings.is_empty() {
            crate::losses::LossMode::CtcOnly
        } else {
            self.config.loss_mode
        };
        let (total, breakdown) = combine(g, &terms, weights, mode)?;
        Ok(BatchLoss {
            total,
            breakdown,
            routings: out.routings,
            skipped,
        })
    }
}

fn concat_routings(sess: &mut Session, parts: Vec<Routing>) -> Result<Routing> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    let probs: Vec<Var> = parts.iter().map(|r| r.probs).collect();
    let records: Vec<RouterRecord> = parts.into_iter().map(|r| r.record).collect();
    Ok(Routing {
        probs: sess.graph.concat(&probs, 0)?,
        record: RouterRecord::concat(&records)?,
    })
}

fn mean_ctc(sess: &mut Session, logits: &[Var], labels: &[Vec<usize>], blank: usize) -> Result<Var> {
    let g = &mut sess.graph;
    let mut total: Option<Var> = None;
    for (&l, target) in logits.iter().zip(labels) {
        let lp = g.log_softmax(l, 1)?;
        let nll = match ctc_loss(g, lp, target, blank)? {
            CtcLoss::Finite(v) => v,
            CtcLoss::Infeasible => {
                return Err(Error::Contract("target longer than the utterance allows".into()))
            }
        };
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no utterances to score".into()))?;
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}
