use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::RouterRecord;

/// Routing summary of one MoE layer over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub frames: usize,
    /// Fraction of frames dispatched to each expert.
    pub load: Vec<f64>,
    /// Mean router probability of each expert; this is also the mean
    /// importance the importance loss squares.
    pub mean_prob: Vec<f64>,
    /// `n · Σ Imp²`.
    pub importance_loss: f64,
    /// `n · Σ s·P`.
    pub balancing_loss: f64,
    /// Mean L1 norm of the unit-L2-normalized router distributions.
    pub sparsity: f64,
    /// Mean per-frame router entropy in nats.
    pub entropy: f64,
    /// Mean probability of the selected expert.
    pub mean_gate: f64,
    /// Largest over smallest load; `None` when some expert received nothing.
    pub load_ratio: Option<f64>,
    pub min_load: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RouteStats {
    pub layers: Vec<LayerStats>,
}

impl RouteStats {
    pub fn mean_entropy(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.entropy))
    }

    pub fn mean_gate(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.mean_gate))
    }

    /// Worst (largest) per-layer load ratio; infinite if any expert is idle.
    pub fn max_load_ratio(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.load_ratio.unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Mean per-layer load ratio; infinite if any expert is idle.
    pub fn mean_load_ratio(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.load_ratio.unwrap_or(f64::INFINITY)))
    }

    pub fn min_load(&self) -> f64 {
        self.layers.iter().map(|l| l.min_load).fold(f64::INFINITY, f64::min)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates per-layer router records; each record must cover the same
/// real (unpadded) frames.
pub fn collect_route_stats(records: &[RouterRecord]) -> Result<RouteStats> {
    let mut layers = Vec::with_capacity(records.len());
    for (layer, rec) in records.iter().enumerate() {
        let frames = rec.frames();
        if frames == 0 {
            return Err(Error::Contract("route statistics need at least one frame".into()));
        }
        let n = rec.n_experts();
        let mut load = vec![0.0; n];
        let mut mean_prob = vec![0.0; n];
        let (mut sparsity, mut entropy, mut gate) = (0.0, 0.0, 0.0);
        for t in 0..frames {
            let row = rec.probs.row(t);
            load[rec.selected[t]] += 1.0;
            gate += rec.gate[t];
            let norm = row.iter().map(|p| p * p).sum::<f64>().sqrt();
            sparsity += row.iter().map(|p| p.abs()).sum::<f64>() / norm.max(crate::losses::L2_EPS);
            entropy -= row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            for (m, p) in mean_prob.iter_mut().zip(row) {
                *m += p;
            }
        }
        let m = frames as f64;
        load.iter_mut().for_each(|s| *s /= m);
        mean_prob.iter_mut().for_each(|p| *p /= m);
        let max = load.iter().copied().fold(0.0, f64::max);
        let min = load.iter().copied().fold(f64::INFINITY, f64::min);
        layers.push(LayerStats {
            layer,
            frames,
            importance_loss: n as f64 * mean_prob.iter().map(|p| p * p).sum::<f64>(),
            balancing_loss: n as f64 * load.iter().zip(&mean_prob).map(|(s, p)| s * p).sum::<f64>(),
            load_ratio: (min > 0.0).then(|| max / min),
            min_load: min,
            load,
            mean_prob,
            sparsity: sparsity / m,
            entropy: entropy / m,
            mean_gate: gate / m,
        });
    }
    Ok(RouteStats { layers })
}
