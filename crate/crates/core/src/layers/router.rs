use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// What a router sees: the previous layer's output alone, or the shared
/// embedding concatenated in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    Plain,
    EmbeddingConcat,
}

/// Linear + softmax gate over `n` experts, without bias.
#[derive(Debug, Clone)]
pub struct Router {
    pub weight: ParamId,
    pub mode: RouterMode,
    pub d: usize,
    pub n_experts: usize,
}

/// Per-frame routing outcome of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterRecord {
    /// `[frames × n]` router probabilities.
    pub probs: Tensor,
    pub selected: Vec<usize>,
    /// `probs[t, selected[t]]`.
    pub gate: Vec<f64>,
}

/// A record together with the differentiable probability node it came from.
#[derive(Debug, Clone)]
pub struct Routing {
    pub probs: Var,
    pub record: RouterRecord,
}

impl RouterRecord {
    /// Top-1 selection with lowest-index tie-break.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let (frames, n) = probs.dims2()?;
        let mut selected = Vec::with_capacity(frames);
        let mut gate = Vec::with_capacity(frames);
        for t in 0..frames {
            let row = probs.row(t);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            selected.push(best);
            gate.push(row[best]);
        }
        Ok(RouterRecord {
            probs,
            selected,
            gate,
        })
    }

    pub fn frames(&self) -> usize {
        self.selected.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Stacks records of successive utterances along the frame axis.
    pub fn concat(records: &[RouterRecord]) -> Result<Self> {
        let n = records
            .first()
            .ok_or_else(|| Error::Contract("no router records to concatenate".into()))?
            .n_experts();
        let mut data = Vec::new();
        let mut selected = Vec::new();
        let mut gate = Vec::new();
        for r in records {
            if r.n_experts() != n {
                return Err(Error::Contract("router records disagree on expert count".into()));
            }
            data.extend_from_slice(r.probs.data());
            selected.extend_from_slice(&r.selected);
            gate.extend_from_slice(&r.gate);
        }
        Ok(RouterRecord {
            probs: Tensor::new(vec![selected.len(), n], data)?,
            selected,
            gate,
        })
    }

    /// Indices of the frames dispatched to each expert.
    pub fn dispatch(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_experts()];
        for (t, &e) in self.selected.iter().enumerate() {
            groups[e].push(t);
        }
        groups
    }
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        d: usize,
        n_experts: usize,
        mode: RouterMode,
    ) -> Result<Self> {
        let in_dim = Self::input_dim(d, mode);
        let wname = format!("{name}.weight");
        let weight = store.add(&wname, init.xavier(&wname, &[in_dim, n_experts], in_dim, n_experts))?;
        Ok(Router {
            weight,
            mode,
            d,
            n_experts,
        })
    }

    pub fn input_dim(d: usize, mode: RouterMode) -> usize {
        match mode {
            RouterMode::Plain => d,
            RouterMode::EmbeddingConcat => 2 * d,
        }
    }

    pub fn param_count(d: usize, n_experts: usize, mode: RouterMode) -> usize {
        Self::input_dim(d, mode) * n_experts
    }

    /// Router probabilities for every frame of `o_prev`. In embedding-concat
    /// mode `embedding` must be present and frame-aligned with `o_prev`.
    pub fn route(&self, sess: &mut Session, o_prev: Var, embedding: Option<Var>) -> Result<Routing> {
        let input = match (self.mode, embedding) {
            (RouterMode::Plain, None) => o_prev,
            (RouterMode::EmbeddingConcat, Some(e)) => {
                let (te, to) = (sess.graph.shape(e)[0], sess.graph.shape(o_prev)[0]);
                if te != to {
                    return Err(Error::Contract(format!(
                        "embedding has {te} frames but layer input has {to}"
                    )));
                }
                sess.graph.concat(&[e, o_prev], 1)?
            }
            (RouterMode::Plain, Some(_)) => {
                return Err(Error::Contract("plain router was given an embedding".into()))
            }
            (RouterMode::EmbeddingConcat, None) => {
                return Err(Error::Contract("embedding-concat router needs an embedding".into()))
            }
        };
        let w = sess.param(self.weight);
        let logits = sess.graph.matmul(input, w)?;
        let probs = sess.graph.softmax(logits, 1)?;
        let record = RouterRecord::from_probs(sess.value(probs).clone())?;
        Ok(Routing { probs, record })
    }
}
