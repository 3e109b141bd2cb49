use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Init, ParamStore, Session};

use super::{ExpertFfn, Linear, MemoryBlock, MemoryShape, MultiHeadAttention};

/// Static (expert-free) stack whose last hidden layer is the shared router
/// embedding and whose output head feeds an auxiliary CTC loss.
///
/// It reads the backbone's projected input frames, so its input width is the
/// model dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub ffn: Vec<ExpertFfn>,
    pub memory: Vec<MemoryBlock>,
    /// (layer index after which it runs, block)
    pub attention: Vec<(usize, MultiHeadAttention)>,
    pub head: Linear,
}

#[allow(clippy::too_many_arguments)]
impl EmbeddingNet {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        d: usize,
        hidden: usize,
        depth: usize,
        attention_every: usize,
        heads: usize,
        memory: MemoryShape,
        vocab: usize,
    ) -> Result<Self> {
        let mut net = EmbeddingNet {
            ffn: Vec::with_capacity(depth),
            memory: Vec::with_capacity(depth),
            attention: Vec::new(),
            head: Linear::new(store, init, &format!("{name}.head"), d, vocab, true)?,
        };
        for l in 0..depth {
            net.ffn
                .push(ExpertFfn::new(store, init, &format!("{name}.layer{l}.ffn"), d, hidden)?);
            net.memory
                .push(MemoryBlock::new(store, &format!("{name}.layer{l}.memory"), d, memory)?);
            if attention_every > 0 && (l + 1) % attention_every == 0 {
                let att = MultiHeadAttention::new(store, init, &format!("{name}.layer{l}.attention"), d, heads)?;
                net.attention.push((l, att));
            }
        }
        Ok(net)
    }

    /// Returns `(embedding, logits)`, both frame-aligned with `x`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<(Var, Var)> {
        let mut o = x;
        for (l, (ffn, mem)) in self.ffn.iter().zip(&self.memory).enumerate() {
            let y = ffn.forward(sess, o)?;
            o = sess.graph.add(o, y)?;
            o = mem.forward(sess, o)?;
            if let Some((_, att)) = self.attention.iter().find(|(at, _)| *at == l) {
                let y = att.forward(sess, o)?;
                o = sess.graph.add(o, y)?;
            }
        }
        let logits = self.head.forward(sess, o)?;
        Ok((o, logits))
    }
}
