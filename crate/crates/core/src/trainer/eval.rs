use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::layers::RouterRecord;
use crate::losses::{ctc_value, greedy_decode};
use crate::model::Model;

use super::{collect_route_stats, RouteStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean recognition CTC loss over the scored utterances.
    pub ctc: f64,
    /// Total edit distance over total reference length.
    pub ter: f64,
    pub utterances: usize,
    /// Utterances whose target cannot fit their frame count.
    pub skipped: usize,
    pub route_stats: RouteStats,
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token error rate of `hyps` against `refs`, pooled over the corpus.
pub fn token_error_rate(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(r, h)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return if edits == 0 { 0.0 } else { f64::INFINITY };
    }
    edits as f64 / total as f64
}

/// Scores a corpus with a read-only pass: CTC loss of the backbone output
/// only, greedy decoding and routing statistics over every real frame.
pub fn evaluate(model: &Model, corpus: &[Utterance]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty corpus".into()));
    }
    let blank = model.config.blank();
    let mut per_layer: Vec<Vec<RouterRecord>> = vec![Vec::new(); model.layers.len()];
    let (mut ctc_sum, mut scored, mut skipped) = (0.0, 0usize, 0usize);
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for u in corpus {
        let mut sess = model.session();
        let x = sess.input(u.features.clone());
        let out = model.forward_utterance(&mut sess, x)?;
        let lp = sess.graph.log_softmax(out.logits, 1)?;
        let value = ctc_value(sess.value(lp), &u.labels, blank)?;
        if value.is_infinite() {
            skipped += 1;
        } else {
            ctc_sum += value.nll;
            scored += 1;
        }
        hyps.push(greedy_decode(sess.value(out.logits), blank));
        refs.push(u.labels.clone());
        for (acc, r) in per_layer.iter_mut().zip(out.routings) {
            acc.push(r.record);
        }
    }
    let records = per_layer
        .iter()
        .map(|parts| RouterRecord::concat(parts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        ctc: if scored > 0 { ctc_sum / scored as f64 } else { f64::INFINITY },
        ter: token_error_rate(&hyps, &refs),
        utterances: corpus.len(),
        skipped,
        route_stats: collect_route_stats(&records)?,
    })
}
