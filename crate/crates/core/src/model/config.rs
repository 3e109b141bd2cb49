use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{MemoryShape, RouterMode};
use crate::losses::{AuxAggregation, LossMode};

/// Hyperparameters of an acoustic model. `moe_layers` counts backbone
/// (FFN or MoE, memory) pairs; with `n_experts == 1` the FFN layers are static.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub d: usize,
    pub h_ffn: usize,
    pub heads: usize,
    pub n_experts: usize,
    pub moe_layers: usize,
    /// A self-attention block follows every `attention_every` layers; 0 disables.
    pub attention_every: usize,
    pub input_dim: usize,
    /// Output units, blank included (blank is the last index).
    pub vocab: usize,
    pub router_mode: RouterMode,
    pub loss_mode: LossMode,
    /// Depth of the shared embedding network; 0 means none.
    pub embedding_depth: usize,
    #[serde(default)]
    pub memory: MemoryShape,
    #[serde(default)]
    pub aux_aggregation: AuxAggregation,
}

/// Preset names accepted by [`ModelConfig::preset`]. Each full-scale name
/// also exists with a `desk-` prefix.
pub const PRESETS: &[&str] = &[
    "b1", "b2", "moe-l1", "moe-l1-emb", "moe-imp", "moe-2e", "moe-4e", "moe-8e",
];

struct Scale {
    d: usize,
    h_ffn: usize,
    heads: usize,
    layers: usize,
    attention_every: usize,
    input_dim: usize,
    vocab: usize,
    embedding_depth: usize,
}

const FULL: Scale = Scale {
    d: 512,
    h_ffn: 1024,
    heads: 8,
    layers: 30,
    attention_every: 10,
    // 120-wide features stacked 8 times
    input_dim: 960,
    // 1394 syllables + 39 phones + blank
    vocab: 1434,
    embedding_depth: 30,
};

const DESK: Scale = Scale {
    d: 32,
    h_ffn: 64,
    heads: 4,
    layers: 4,
    attention_every: 2,
    input_dim: 64,
    vocab: 8,
    embedding_depth: 2,
};

impl ModelConfig {
    /// Looks up a named preset such as `moe-4e` or `desk-b1`.
    pub fn preset(name: &str) -> Result<Self> {
        let (scale, base) = match name.strip_prefix("desk-") {
            Some(rest) => (&DESK, rest),
            None => (&FULL, name),
        };
        use LossMode::*;
        use RouterMode::*;
        let (n, mode, loss, with_emb) = match base {
            "b1" => (1, Plain, CtcOnly, false),
            "b2" => (4, Plain, Balancing, false),
            "moe-l1" => (4, Plain, BalancingL1, false),
            "moe-l1-emb" => (4, EmbeddingConcat, BalancingL1, true),
            "moe-imp" | "moe-4e" => (4, EmbeddingConcat, ImportanceL1, true),
            "moe-2e" => (2, EmbeddingConcat, ImportanceL1, true),
            "moe-8e" => (8, EmbeddingConcat, ImportanceL1, true),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {} (optionally prefixed with desk-)",
                    PRESETS.join(", ")
                )))
            }
        };
        // The static baseline absorbs the embedding network's depth so that
        // both spend the same compute per frame.
        let layers = if base == "b1" {
            scale.layers + scale.embedding_depth
        } else {
            scale.layers
        };
        Ok(ModelConfig {
            preset: name.to_string(),
            d: scale.d,
            h_ffn: scale.h_ffn,
            heads: scale.heads,
            n_experts: n,
            moe_layers: layers,
            attention_every: scale.attention_every,
            input_dim: scale.input_dim,
            vocab: scale.vocab,
            router_mode: mode,
            loss_mode: loss,
            embedding_depth: if with_emb { scale.embedding_depth } else { 0 },
            memory: MemoryShape::default(),
            aux_aggregation: AuxAggregation::default(),
        })
    }

    /// Blank label index.
    pub fn blank(&self) -> usize {
        self.vocab - 1
    }

    pub fn has_embedding(&self) -> bool {
        self.embedding_depth > 0
    }

    pub fn attention_blocks(&self, depth: usize) -> usize {
        match self.attention_every {
            0 => 0,
            k => depth / k,
        }
    }

    /// Checks internal consistency, reporting every offending field at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (field, v) in [
            ("d", self.d),
            ("h_ffn", self.h_ffn),
            ("heads", self.heads),
            ("n_experts", self.n_experts),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                problems.push(format!("{field} must be positive"));
            }
        }
        if self.heads > 0 && self.d % self.heads != 0 {
            problems.push(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.vocab < 2 {
            problems.push(format!("vocab ({}) must include at least one label and the blank", self.vocab));
        }
        match (self.router_mode, self.has_embedding()) {
            (RouterMode::EmbeddingConcat, false) => {
                problems.push("router_mode embedding-concat requires embedding_depth > 0".into())
            }
            (RouterMode::Plain, true) => {
                problems.push("embedding_depth > 0 requires router_mode embedding-concat".into())
            }
            _ => {}
        }
        if self.n_experts == 1 && self.router_mode == RouterMode::EmbeddingConcat {
            problems.push("n_experts = 1 has no router to feed; router_mode must be plain".into());
        }
        if self.memory.lookback_stride == 0 || self.memory.lookahead_stride == 0 {
            problems.push("memory strides must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
