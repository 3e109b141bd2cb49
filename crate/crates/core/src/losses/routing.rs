//! Auxiliary routing losses computed over the frames of a mini-batch.
//!
//! Each loss is evaluated per MoE layer and then aggregated across layers
//! according to [`AuxAggregation`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Routing;
use crate::tensor::Tensor;

/// Guards the unit normalization of an all-zero distribution.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxAggregation {
    /// Average of the per-layer losses.
    #[default]
    Mean,
    /// Sum of the per-layer losses.
    Sum,
}

fn aggregate(g: &mut Graph, per_layer: Vec<Var>, agg: AuxAggregation) -> Result<Var> {
    let n = per_layer.len();
    if n == 0 {
        return Err(Error::Contract("auxiliary loss needs at least one MoE layer".into()));
    }
    let mut total = per_layer[0];
    for &v in &per_layer[1..] {
        total = g.add(total, v)?;
    }
    Ok(match agg {
        AuxAggregation::Mean => g.scale(total, 1.0 / n as f64),
        AuxAggregation::Sum => total,
    })
}

fn check_frames(r: &Routing) -> Result<()> {
    if r.record.frames() == 0 {
        return Err(Error::Contract("routing loss needs at least one frame".into()));
    }
    Ok(())
}

/// `n · Σᵢ sᵢ·Pᵢ` with `sᵢ` the dispatched fraction (a constant) and `Pᵢ`
/// the mean router probability of expert `i`.
pub fn balancing_loss(g: &mut Graph, layers: &[Routing], agg: AuxAggregation) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for r in layers {
        check_frames(r)?;
        let n = r.record.n_experts();
        let m = r.record.frames() as f64;
        let mut load = vec![0.0; n];
        for &e in &r.record.selected {
            load[e] += 1.0 / m;
        }
        let mean_prob = g.mean_axis(r.probs, 0)?;
        let s = g.constant(Tensor::vector(load));
        let prod = g.mul(mean_prob, s)?;
        let dot = g.sum_all(prod);
        per_layer.push(g.scale(dot, n as f64));
    }
    aggregate(g, per_layer, agg)
}

/// Mean over frames of `‖p / max(‖p‖₂, ε)‖₁`.
pub fn sparsity_l1_loss(g: &mut Graph, layers: &[Routing], agg: AuxAggregation) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for r in layers {
        check_frames(r)?;
        per_layer.push(normalized_l1(g, r.probs)?);
    }
    aggregate(g, per_layer, agg)
}

/// Mean over rows of the L1 norm of each unit-L2-normalized row of `f`.
pub fn normalized_l1(g: &mut Graph, f: Var) -> Result<Var> {
    let unit = g.l2_normalize(f, 1, L2_EPS)?;
    let sign: Vec<f64> = g.value(unit).data().iter().map(|v| v.signum()).collect();
    let sign = g.constant(Tensor::new(g.shape(unit).to_vec(), sign)?);
    let abs = g.mul(unit, sign)?;
    let rows = g.shape(f)[0] as f64;
    let total = g.sum_all(abs);
    Ok(g.scale(total, 1.0 / rows))
}

/// `n · Σⱼ Impⱼ²` with `Impⱼ` the batch-mean probability of expert `j`.
pub fn mean_importance_loss(g: &mut Graph, layers: &[Routing], agg: AuxAggregation) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for r in layers {
        check_frames(r)?;
        let n = r.record.n_experts() as f64;
        let imp = g.mean_axis(r.probs, 0)?;
        let sq = g.square(imp);
        let total = g.sum_all(sq);
        per_layer.push(g.scale(total, n));
    }
    aggregate(g, per_layer, agg)
}
