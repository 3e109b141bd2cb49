use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Init, ParamStore, Session};

use super::Linear;

/// One-hidden-layer ReLU feed-forward network mapping `d → hidden → d`.
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub up: Linear,
    pub down: Linear,
}

impl ExpertFfn {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(ExpertFfn {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden, true) + Linear::param_count(hidden, d, true)
    }

    /// `relu(x·W1 + b1)·W2 + b2` per frame.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(sess, x)?;
        let h = sess.graph.relu(h);
        self.down.forward(sess, h)
    }
}
