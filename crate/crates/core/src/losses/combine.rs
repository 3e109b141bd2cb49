use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Scales of the sparsity, balance (importance or balancing) and embedding
/// terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which auxiliary routing terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ctc-only")]
    CtcOnly,
    #[serde(rename = "balancing")]
    Balancing,
    #[serde(rename = "balancing+l1")]
    BalancingL1,
    #[serde(rename = "importance+l1")]
    ImportanceL1,
}

impl LossMode {
    pub fn uses_sparsity(self) -> bool {
        matches!(self, LossMode::BalancingL1 | LossMode::ImportanceL1)
    }

    pub fn uses_balancing(self) -> bool {
        matches!(self, LossMode::Balancing | LossMode::BalancingL1)
    }

    pub fn uses_importance(self) -> bool {
        self == LossMode::ImportanceL1
    }
}

/// Graph nodes of the individual loss terms; absent terms were not computed.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub recognition: Var,
    pub sparsity: Option<Var>,
    pub importance: Option<Var>,
    pub balancing: Option<Var>,
    pub embedding: Option<Var>,
}

/// Scalar values of every computed term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recognition: f64,
    pub sparsity: Option<f64>,
    pub importance: Option<f64>,
    pub balancing: Option<f64>,
    pub embedding: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `L_r + α·L_s + β·(L̄_m or L_b) + γ·L_e` per `mode`.
    pub fn weighted_total(&self, w: &LossWeights, mode: LossMode) -> f64 {
        let mut total = self.recognition;
        if mode.uses_sparsity() {
            total += w.alpha * self.sparsity.unwrap_or(0.0);
        }
        if mode.uses_importance() {
            total += w.beta * self.importance.unwrap_or(0.0);
        }
        if mode.uses_balancing() {
            total += w.beta * self.balancing.unwrap_or(0.0);
        }
        total + w.gamma * self.embedding.unwrap_or(0.0)
    }
}

/// Builds the weighted objective. Terms the mode does not use are reported
/// in the breakdown but left out of the total.
pub fn combine(g: &mut Graph, terms: &LossTerms, w: &LossWeights, mode: LossMode) -> Result<(Var, LossBreakdown)> {
    let value = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item());
    let mut total = terms.recognition;
    let mut add = |g: &mut Graph, term: Option<Var>, weight: f64, used: bool, what: &str| -> Result<()> {
        if !used {
            return Ok(());
        }
        let term = term.ok_or_else(|| Error::Contract(format!("loss mode {mode:?} needs the {what} term")))?;
        let scaled = g.scale(term, weight);
        total = g.add(total, scaled)?;
        Ok(())
    };
    add(g, terms.sparsity, w.alpha, mode.uses_sparsity(), "sparsity")?;
    add(g, terms.importance, w.beta, mode.uses_importance(), "importance")?;
    add(g, terms.balancing, w.beta, mode.uses_balancing(), "balancing")?;
    add(g, terms.embedding, w.gamma, terms.embedding.is_some(), "embedding")?;
    let breakdown = LossBreakdown {
        recognition: g.value(terms.recognition).item(),
        sparsity: value(g, terms.sparsity),
        importance: value(g, terms.importance),
        balancing: value(g, terms.balancing),
        embedding: value(g, terms.embedding),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}
