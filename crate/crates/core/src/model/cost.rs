//! Closed-form parameter and compute accounting.
//!
//! Compute counts the matrix work on the active inference path: one expert
//! per routed layer, the router, memory taps, attention (whose score and
//! mixing products grow with the utterance length) and the output layer.
//! Elementwise work (biases, ReLU, residual sums, softmax normalization) is
//! ignored. The embedding network's CTC head only exists for training, so it
//! holds parameters but costs nothing at inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ExpertFfn, Linear, MemoryBlock, MultiHeadAttention, Router};

use super::ModelConfig;

/// Frames per second of audio after 10 ms framing and subsampling by 3.
pub const FRAMES_PER_SECOND: f64 = 100.0 / 3.0;

/// How many FLOPs one multiply-accumulate counts as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    #[default]
    Mac1,
    Mac2,
}

impl FlopConvention {
    pub fn factor(self) -> f64 {
        match self {
            FlopConvention::Mac1 => 1.0,
            FlopConvention::Mac2 => 2.0,
        }
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac1" => Ok(FlopConvention::Mac1),
            "mac2" => Ok(FlopConvention::Mac2),
            other => Err(Error::Config(format!("unknown FLOP convention {other:?} (mac1 or mac2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: String,
    pub convention: FlopConvention,
    pub audio_seconds: f64,
    pub frames: f64,
    pub params: u64,
    /// Operations for the whole `audio_seconds` of audio.
    pub flops: f64,
    pub flops_per_second: f64,
    pub components: Vec<ComponentCost>,
}

impl CostReport {
    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }
}

/// Parameter total and compute for one second of audio under MAC=1.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    count_flops(cfg, 1.0, FlopConvention::Mac1)
}

/// Compute for an `audio_seconds` utterance, evaluated as a single sequence
/// of `audio_seconds · 100/3` frames.
pub fn count_flops(cfg: &ModelConfig, audio_seconds: f64, convention: FlopConvention) -> Result<CostReport> {
    cfg.validate()?;
    if !(audio_seconds > 0.0 && audio_seconds.is_finite()) {
        return Err(Error::Config(format!("audio_seconds must be positive, got {audio_seconds}")));
    }
    let frames = audio_seconds * FRAMES_PER_SECOND;
    let (d, h) = (cfg.d, cfg.h_ffn);
    let expert = ExpertFfn::param_count(d, h) as u64;
    let expert_macs = (2 * d * h) as f64;
    let memory = MemoryBlock::param_count(d, &cfg.memory) as u64;
    let memory_macs = (cfg.memory.taps() * d) as f64;
    let attention = MultiHeadAttention::param_count(d) as u64;
    // projections per frame plus QKᵀ and weights·V, each T·d per frame
    let attention_macs = (4 * d * d) as f64 + 2.0 * frames * d as f64;

    let mut parts = Vec::new();
    let mut push = |name: &str, params: u64, macs_per_frame: f64| {
        parts.push(ComponentCost {
            name: name.to_string(),
            params,
            flops: macs_per_frame * frames * convention.factor(),
        });
    };

    push(
        "input",
        Linear::param_count(cfg.input_dim, d, false) as u64,
        (cfg.input_dim * d) as f64,
    );

    if cfg.has_embedding() {
        let depth = cfg.embedding_depth as u64;
        let blocks = cfg.attention_blocks(cfg.embedding_depth) as u64;
        push("embedding.ffn", depth * expert, depth as f64 * expert_macs);
        push("embedding.memory", depth * memory, depth as f64 * memory_macs);
        push("embedding.attention", blocks * attention, blocks as f64 * attention_macs);
        push("embedding.head", Linear::param_count(d, cfg.vocab, true) as u64, 0.0);
    }

    let layers = cfg.moe_layers as u64;
    let blocks = cfg.attention_blocks(cfg.moe_layers) as u64;
    push(
        "backbone.ffn",
        layers * cfg.n_experts as u64 * expert,
        layers as f64 * expert_macs,
    );
    if cfg.n_experts > 1 {
        let router = Router::param_count(d, cfg.n_experts, cfg.router_mode) as u64;
        push("backbone.router", layers * router, (layers * router) as f64);
    }
    push("backbone.memory", layers * memory, layers as f64 * memory_macs);
    push("backbone.attention", blocks * attention, blocks as f64 * attention_macs);
    push(
        "output",
        Linear::param_count(d, cfg.vocab, true) as u64,
        (d * cfg.vocab) as f64,
    );

    let params = parts.iter().map(|c| c.params).sum();
    let flops: f64 = parts.iter().map(|c| c.flops).sum();
    Ok(CostReport {
        preset: cfg.preset.clone(),
        convention,
        audio_seconds,
        frames,
        params,
        flops,
        flops_per_second: flops / audio_seconds,
        components: parts,
    })
}
