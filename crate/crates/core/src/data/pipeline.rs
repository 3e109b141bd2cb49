use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor used by [`cmvn_apply`].
pub const CMVN_VAR_FLOOR: f64 = 1e-8;

/// Frame `t'` of the output concatenates input frames `rate·t' .. rate·t' + stack`,
/// reading zeros past the end. The output has `ceil(T / rate)` frames.
pub fn stack_subsample(features: &Tensor, stack: usize, rate: usize) -> Result<Tensor> {
    if stack == 0 || rate == 0 {
        return Err(Error::Contract(format!("stack ({stack}) and rate ({rate}) must be positive")));
    }
    let (t, dim) = features.dims2()?;
    let out_frames = t.div_ceil(rate);
    let width = dim * stack;
    let mut data = vec![0.0; out_frames * width];
    for o in 0..out_frames {
        for k in 0..stack {
            let src = o * rate + k;
            if src >= t {
                break;
            }
            data[o * width + k * dim..o * width + (k + 1) * dim].copy_from_slice(features.row(src));
        }
    }
    Ok(Tensor::new(vec![out_frames, width], data)?)
}

/// Per-coordinate pooled statistics over every frame of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn cmvn_fit<'a>(utterances: impl IntoIterator<Item = &'a Tensor>) -> Result<CmvnStats> {
    let mut sum: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    let mut all = Vec::new();
    for u in utterances {
        let (t, dim) = u.dims2()?;
        if sum.is_empty() {
            sum = vec![0.0; dim];
        } else if sum.len() != dim {
            return Err(Error::Contract(format!("feature width {dim} differs from {}", sum.len())));
        }
        for r in 0..t {
            for (s, v) in sum.iter_mut().zip(u.row(r)) {
                *s += v;
            }
        }
        frames += t;
        all.push(u);
    }
    if frames == 0 {
        return Err(Error::Contract("cannot fit CMVN on an empty corpus".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
    // second pass for a numerically stable variance
    let mut sq = vec![0.0; mean.len()];
    for u in all {
        for r in 0..u.shape()[0] {
            for ((acc, v), m) in sq.iter_mut().zip(u.row(r)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let variance = sq.into_iter().map(|s| s / frames as f64).collect();
    Ok(CmvnStats { mean, variance })
}

/// `(x − mean) / sqrt(max(var, floor))` per coordinate.
pub fn cmvn_apply(features: &Tensor, stats: &CmvnStats) -> Result<Tensor> {
    let (t, dim) = features.dims2()?;
    if dim != stats.mean.len() {
        return Err(Error::Contract(format!(
            "feature width {dim} does not match CMVN width {}",
            stats.mean.len()
        )));
    }
    let inv_std: Vec<f64> = stats
        .variance
        .iter()
        .map(|v| 1.0 / v.max(CMVN_VAR_FLOOR).sqrt())
        .collect();
    let mut data = features.data().to_vec();
    for r in 0..t {
        for c in 0..dim {
            let x = &mut data[r * dim + c];
            *x = (*x - stats.mean[c]) * inv_std[c];
        }
    }
    Ok(Tensor::new(vec![t, dim], data)?)
}
