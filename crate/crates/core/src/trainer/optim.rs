use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    /// A zero learning rate is accepted so that a run can be used as a
    /// frozen-parameter probe.
    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be finite and >= 0, got {lr}")));
        }
        match *self {
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config("optimizer.beta1 and beta2 must lie in [0, 1)".into()));
                }
                if !(eps > 0.0) {
                    return Err(Error::Config("optimizer.eps must be positive".into()));
                }
            }
            OptimizerConfig::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config("optimizer.momentum must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// First-order optimizer state aligned with a parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Optimizer {
            config,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr_scale · lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_scale: f64) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let lr = lr * lr_scale;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, p) in store.iter_mut().enumerate() {
                    let g = grads.0[i].data();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { lr, momentum } => {
                let lr = lr * lr_scale;
                for (i, p) in store.iter_mut().enumerate() {
                    let g = grads.0[i].data();
                    let vel = self.first[i].data_mut();
                    for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                        vel[k] = momentum * vel[k] + g[k];
                        *w -= lr * vel[k];
                    }
                }
            }
        }
    }
}
