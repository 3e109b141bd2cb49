use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::params::{Init, ParamId, ParamStore, Session};

/// Affine map `x·W (+ b)` on row-major frames.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.add(&wname, init.xavier(&wname, &[in_dim, out_dim], in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                crate::tensor::Tensor::zeros(&[out_dim]),
            )?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let cols = sess.value(x).dims2()?.1;
        if cols != self.in_dim {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: sess.graph.shape(x).to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            }
            .into());
        }
        let w = sess.param(self.weight);
        let mut y = sess.graph.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = sess.param(b);
            y = sess.graph.add(y, b)?;
        }
        Ok(y)
    }
}
