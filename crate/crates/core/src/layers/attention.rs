use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};

use super::Linear;

/// Unmasked full-sequence multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |p: &str| Linear::new(store, init, &format!("{name}.{p}"), d, d, false);
        Ok(MultiHeadAttention {
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
            heads,
            d,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d, false)
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let q = self.query.forward(sess, x)?;
        let k = self.key.forward(sess, x)?;
        let v = self.value.forward(sess, x)?;
        let dk = self.d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = sess.graph.slice_cols(q, lo, hi)?;
            let kh = sess.graph.slice_cols(k, lo, hi)?;
            let vh = sess.graph.slice_cols(v, lo, hi)?;
            let kt = sess.graph.transpose(kh)?;
            let scores = sess.graph.matmul(qh, kt)?;
            let scores = sess.graph.scale(scores, scale);
            let weights = sess.graph.softmax(scores, 1)?;
            heads.push(sess.graph.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            sess.graph.concat(&heads, 1)?
        };
        self.output.forward(sess, joined)
    }
}
