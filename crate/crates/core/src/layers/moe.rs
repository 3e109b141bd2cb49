use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};

use super::{ExpertFfn, Router, RouterMode, Routing};

/// Router plus `n` experts; each frame runs through exactly one expert.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<ExpertFfn>,
}

impl MoeLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        d: usize,
        hidden: usize,
        n_experts: usize,
        mode: RouterMode,
    ) -> Result<Self> {
        let router = Router::new(store, init, &format!("{name}.router"), d, n_experts, mode)?;
        let experts = (0..n_experts)
            .map(|i| ExpertFfn::new(store, init, &format!("{name}.expert{i}"), d, hidden))
            .collect::<Result<_>>()?;
        Ok(MoeLayer { router, experts })
    }

    /// Routed expert output (without the residual) and the routing used.
    pub fn forward(&self, sess: &mut Session, x: Var, embedding: Option<Var>) -> Result<(Var, Routing)> {
        let routing = self.router.route(sess, x, embedding)?;
        let y = moe_forward(sess, &self.experts, &routing, x)?;
        Ok((y, routing))
    }
}

/// `y_t = gate_t · E_{selected_t}(x_t)`.
///
/// Only the selected expert is evaluated for each frame. The selection is a
/// constant of the graph, so the router receives gradient through the gate
/// factor alone.
pub fn moe_forward(sess: &mut Session, experts: &[ExpertFfn], routing: &Routing, x: Var) -> Result<Var> {
    let frames = sess.graph.shape(x)[0];
    let rec = &routing.record;
    if rec.frames() != frames {
        return Err(Error::Contract(format!(
            "router record covers {} frames, input has {frames}",
            rec.frames()
        )));
    }
    if let Some(&bad) = rec.selected.iter().find(|&&e| e >= experts.len()) {
        return Err(Error::Contract(format!(
            "selected expert {bad} out of range for {} experts",
            experts.len()
        )));
    }
    let mut groups = vec![Vec::new(); experts.len()];
    for (t, &e) in rec.selected.iter().enumerate() {
        groups[e].push(t);
    }
    let mut combined: Option<Var> = None;
    for (expert, rows) in experts.iter().zip(&groups) {
        if rows.is_empty() {
            continue;
        }
        let xs = sess.graph.gather_rows(x, rows)?;
        let ys = expert.forward(sess, xs)?;
        sess.count_expert_frames(rows.len());
        let placed = sess.graph.scatter_rows(ys, rows, frames)?;
        combined = Some(match combined {
            None => placed,
            Some(acc) => sess.graph.add(acc, placed)?,
        });
    }
    let combined = combined.ok_or_else(|| Error::Contract("MoE layer got zero frames".into()))?;
    let gate = sess.graph.pick_per_row(routing.probs, &rec.selected)?;
    Ok(sess.graph.row_scale(combined, gate)?)
}
