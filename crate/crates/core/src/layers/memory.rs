use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Tap orders and strides of a memory block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryShape {
    pub lookback_order: usize,
    pub lookahead_order: usize,
    pub lookback_stride: usize,
    pub lookahead_stride: usize,
}

impl Default for MemoryShape {
    fn default() -> Self {
        MemoryShape {
            lookback_order: 5,
            lookahead_order: 1,
            lookback_stride: 2,
            lookahead_stride: 1,
        }
    }
}

impl MemoryShape {
    pub fn taps(&self) -> usize {
        self.lookback_order + self.lookahead_order
    }
}

/// Scalar-FSMN memory block:
///
/// `m_t = h_t + Σ_{i=1..N1} a_i ⊙ h_{t−s1·i} + Σ_{j=1..N2} c_j ⊙ h_{t+s2·j}`
///
/// with frames outside the sequence read as zero. Coefficients are per
/// dimension and start at zero, so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct MemoryBlock {
    pub lookback: Vec<ParamId>,
    pub lookahead: Vec<ParamId>,
    pub shape: MemoryShape,
    pub d: usize,
}

impl MemoryBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, shape: MemoryShape) -> Result<Self> {
        let lookback = (1..=shape.lookback_order)
            .map(|i| store.add(format!("{name}.back{i}"), Tensor::zeros(&[d])))
            .collect::<Result<_>>()?;
        let lookahead = (1..=shape.lookahead_order)
            .map(|j| store.add(format!("{name}.ahead{j}"), Tensor::zeros(&[d])))
            .collect::<Result<_>>()?;
        Ok(MemoryBlock {
            lookback,
            lookahead,
            shape,
            d,
        })
    }

    pub fn param_count(d: usize, shape: &MemoryShape) -> usize {
        shape.taps() * d
    }

    pub fn forward(&self, sess: &mut Session, h: Var) -> Result<Var> {
        let s1 = self.shape.lookback_stride as isize;
        let s2 = self.shape.lookahead_stride as isize;
        let taps = self
            .lookback
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, -s1 * (i as isize + 1)))
            .chain(
                self.lookahead
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| (p, s2 * (j as isize + 1))),
            )
            .collect::<Vec<_>>();
        let mut m = h;
        for (coef, offset) in taps {
            let shifted = sess.graph.shift_rows(h, offset)?;
            let c = sess.param(coef);
            let tap = sess.graph.mul(shifted, c)?;
            m = sess.graph.add(m, tap)?;
        }
        Ok(m)
    }
}
