//! Finite-difference checks of every differentiable component at the
//! dimensions of a model configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GradCheckConfig, GradCheckReport, Var};
use crate::data::{synth_corpus, Batch, SynthSpec};
use crate::error::{Error, Result};
use crate::layers::{ExpertFfn, MemoryBlock, MoeLayer, MultiHeadAttention, Router, RouterMode};
use crate::losses::{ctc_loss, CtcLoss, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::{check_gradients, Init, ParamStore, Session};
use crate::tensor::Tensor;

/// Relative-error tolerance of the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Frames in the synthetic inputs of the per-component checks.
const FRAMES: usize = 6;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

/// Moves zero-initialized parameters (memory coefficients, biases) off zero
/// so that their gradients are exercised away from the identity point.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
}

fn weighted_sum(sess: &mut Session, y: Var, weights: &Tensor) -> Result<Var> {
    let w = sess.input(weights.clone());
    let p = sess.graph.mul(y, w)?;
    Ok(sess.graph.sum_all(p))
}

/// Runs the suite. Component checks probe every coordinate; the full
/// objective samples `objective_coords` coordinates per tensor.
pub fn gradient_suite(cfg: &ModelConfig, seed: u64, objective_coords: usize) -> Result<Vec<ComponentCheck>> {
    cfg.validate()?;
    if cfg.input_dim > 256 || cfg.d > 128 {
        return Err(Error::Config(format!(
            "gradient suite is meant for small models; {} has d={} and input_dim={}",
            cfg.preset, cfg.d, cfg.input_dim
        )));
    }
    let check = GradCheckConfig {
        tolerance: SUITE_TOLERANCE,
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Init::new(seed);
    let (d, h, n) = (cfg.d, cfg.h_ffn, cfg.n_experts.max(2));
    let x = random(&mut rng, &[FRAMES, d], 1.0);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(ComponentCheck {
            component: name.to_string(),
            report,
        })
    };

    let mut store = ParamStore::new();
    let ffn = ExpertFfn::new(&mut store, &init, "ffn", d, h)?;
    perturb(&mut store, &mut rng);
    let w = random(&mut rng, &[FRAMES, d], 1.0);
    let r = check_gradients(
        &store,
        &[x.clone()],
        |s, v| {
            let y = ffn.forward(s, v[0])?;
            weighted_sum(s, y, &w)
        },
        &check,
    )?;
    push("expert_ffn", r);

    for (name, mode) in [
        ("router_plain", RouterMode::Plain),
        ("router_embedding", RouterMode::EmbeddingConcat),
    ] {
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, &init, "router", d, n, mode)?;
        let w = random(&mut rng, &[FRAMES, n], 1.0);
        let mut inputs = vec![x.clone()];
        if mode == RouterMode::EmbeddingConcat {
            inputs.push(random(&mut rng, &[FRAMES, d], 1.0));
        }
        let r = check_gradients(
            &store,
            &inputs,
            |s, v| {
                let routing = router.route(s, v[0], v.get(1).copied())?;
                weighted_sum(s, routing.probs, &w)
            },
            &check,
        )?;
        push(name, r);
    }

    let mut store = ParamStore::new();
    let moe = MoeLayer::new(&mut store, &init, "moe", d, h, n, RouterMode::EmbeddingConcat)?;
    perturb(&mut store, &mut rng);
    let e = random(&mut rng, &[FRAMES, d], 1.0);
    let w = random(&mut rng, &[FRAMES, d], 1.0);
    let r = check_gradients(
        &store,
        &[x.clone(), e],
        |s, v| {
            let (y, _) = moe.forward(s, v[0], Some(v[1]))?;
            weighted_sum(s, y, &w)
        },
        &check,
    )?;
    push("moe_layer", r);

    let mut store = ParamStore::new();
    let memory = MemoryBlock::new(&mut store, "memory", d, cfg.memory)?;
    perturb(&mut store, &mut rng);
    let frames = FRAMES.max(cfg.memory.lookback_order * cfg.memory.lookback_stride + 2);
    let hx = random(&mut rng, &[frames, d], 1.0);
    let w = random(&mut rng, &[frames, d], 1.0);
    let r = check_gradients(
        &store,
        &[hx],
        |s, v| {
            let y = memory.forward(s, v[0])?;
            weighted_sum(s, y, &w)
        },
        &check,
    )?;
    push("memory", r);

    let mut store = ParamStore::new();
    let attention = MultiHeadAttention::new(&mut store, &init, "attention", d, cfg.heads)?;
    let w = random(&mut rng, &[FRAMES, d], 1.0);
    let r = check_gradients(
        &store,
        &[x.clone()],
        |s, v| {
            let y = attention.forward(s, v[0])?;
            weighted_sum(s, y, &w)
        },
        &check,
    )?;
    push("attention", r);

    let vocab = cfg.vocab;
    let blank = cfg.blank();
    let target: Vec<usize> = (0..3).map(|i| (i * 2 + 1) % blank).collect();
    let logits = random(&mut rng, &[FRAMES + 2, vocab], 2.0);
    let r = check_gradients(
        &ParamStore::new(),
        &[logits],
        |s, v| {
            let lp = s.graph.log_softmax(v[0], 1)?;
            match ctc_loss(&mut s.graph, lp, &target, blank)? {
                CtcLoss::Finite(l) => Ok(l),
                CtcLoss::Infeasible => Err(Error::Contract("suite target does not fit".into())),
            }
        },
        &check,
    )?;
    push("ctc", r);

    let mut model = Model::build(cfg.clone(), seed)?;
    perturb(&mut model.params, &mut rng);
    let corpus = synth_corpus(&SynthSpec {
        utterances: 2,
        dim: cfg.input_dim,
        vocab,
        clusters: blank.max(1),
        min_segments: 1,
        max_segments: 2,
        min_segment_frames: 2,
        max_segment_frames: 3,
        seed,
        ..Default::default()
    })?;
    let batch = Batch::from_utterances(&corpus.iter().collect::<Vec<_>>())?;
    let weights = LossWeights::default();
    let r = check_gradients(
        &model.params,
        &[],
        |s, _| Ok(model.loss(s, &batch, &weights)?.total),
        &GradCheckConfig {
            max_coords: Some(objective_coords),
            ..check
        },
    )?;
    push("full_objective", r);
    Ok(out)
}
