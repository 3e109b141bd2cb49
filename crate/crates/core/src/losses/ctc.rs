//! Connectionist temporal classification loss.
//!
//! Forward (alpha) and backward (beta) recursions run in log space over the
//! blank-interleaved label sequence. The gradient with respect to the input
//! log-probabilities is the negated state occupancy, so the loss node stores
//! it at construction and backpropagation is a single scaled copy.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Minimum frame count that can emit `target` (one frame per label plus one
/// separating blank between repeats).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood and its gradient for one utterance.
#[derive(Debug, Clone)]
pub struct CtcValue {
    /// `f64::INFINITY` when no alignment of `target` fits in the frames.
    pub nll: f64,
    /// d nll / d log_probs, row-major `[T × V]`; `None` when infeasible.
    pub grad: Option<Vec<f64>>,
}

impl CtcValue {
    pub fn is_infinite(&self) -> bool {
        self.nll.is_infinite()
    }
}

fn validate(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (t, v) = log_probs.dims2()?;
    if blank >= v {
        return Err(Error::Contract(format!("blank {blank} out of range for {v} units")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= v || l == blank) {
        return Err(Error::Contract(format!(
            "target label {bad} invalid (vocab {v}, blank {blank})"
        )));
    }
    if !log_probs.all_finite() {
        return Err(crate::TensorError::NonFinite { op: "ctc_loss" }.into());
    }
    Ok((t, v))
}

/// Computes the CTC negative log-likelihood of `target` under per-frame
/// log-probabilities `[T × V]`.
pub fn ctc_value(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<CtcValue> {
    let (frames, vocab) = validate(log_probs, target, blank)?;
    if min_frames(target) > frames {
        return Ok(CtcValue {
            nll: f64::INFINITY,
            grad: None,
        });
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * vocab + k];
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let states = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, ext[0]);
    if states > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let stay = alpha[(t - 1) * states + s];
            let step = if s >= 1 { alpha[(t - 1) * states + s - 1] } else { neg };
            let skip = if skip_ok(s) { alpha[(t - 1) * states + s - 2] } else { neg };
            let acc = lse3(stay, step, skip);
            alpha[t * states + s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * states;
    let log_p = if states > 1 {
        lse2(alpha[last + states - 1], alpha[last + states - 2])
    } else {
        alpha[last]
    };
    if log_p == neg {
        return Ok(CtcValue {
            nll: f64::INFINITY,
            grad: None,
        });
    }

    // beta[t][s]: log-probability of completing the target from state s at
    // frame t, excluding frame t's own emission.
    let mut beta = vec![neg; frames * states];
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| lp(t + 1, ext[s2]) + beta[(t + 1) * states + s2];
            let stay = next(s);
            let step = if s + 1 < states { next(s + 1) } else { neg };
            let skip = if s + 2 < states && skip_ok(s + 2) { next(s + 2) } else { neg };
            beta[t * states + s] = lse3(stay, step, skip);
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s];
            if occ > neg {
                grad[t * vocab + ext[s]] -= (occ - log_p).exp();
            }
        }
    }
    Ok(CtcValue {
        nll: -log_p,
        grad: Some(grad),
    })
}

/// Outcome of recording a CTC loss on a graph.
#[derive(Debug, Clone, Copy)]
pub enum CtcLoss {
    Finite(Var),
    /// The target cannot be aligned within the available frames.
    Infeasible,
}

/// Records the CTC loss of `log_probs` (`[T × V]`, typically a log-softmax
/// output) as a differentiable scalar.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<CtcLoss> {
    let value = ctc_value(g.value(log_probs), target, blank)?;
    Ok(match value.grad {
        Some(grad) => CtcLoss::Finite(g.scalar_with_grad(log_probs, value.nll, grad)),
        None => CtcLoss::Infeasible,
    })
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(logits: &Tensor, blank: usize) -> Vec<usize> {
    let (frames, vocab) = logits.dims2().expect("logits are a matrix");
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frames {
        let row = &logits.data()[t * vocab..(t + 1) * vocab];
        let best = (1..vocab).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
