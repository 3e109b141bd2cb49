use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckConfig, Graph};
use crate::layers::{RouterRecord, Routing};
use crate::tensor::Tensor;

/// Sums the probability of every length-T path that collapses to `target`.
fn brute_force_ctc(log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, v) = log_probs.dims2().unwrap();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &k)| log_probs.at(i, k))
                .sum::<f64>()
                .exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
    let mut g = Graph::new();
    let logits = Tensor::new(vec![t, v], (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let l = g.constant(logits);
    let lp = g.log_softmax(l, 1).unwrap();
    g.value(lp).clone()
}

#[test]
fn enumerated_two_frame_example() {
    let half = 0.5f64.ln();
    let lp = Tensor::new(vec![2, 2], vec![half; 4]).unwrap();
    // blank = 0, A = 1; paths AA, A-, -A collapse to "A".
    let v = ctc_value(&lp, &[1], 0).unwrap();
    assert!((v.nll - (-(0.75f64).ln())).abs() < 1e-14);
    assert!((brute_force_ctc(&lp, &[1], 0) - v.nll).abs() < 1e-14);
}

#[test]
fn unachievable_target_is_infinite() {
    let lp = Tensor::new(vec![1, 2], vec![0.5f64.ln(); 2]).unwrap();
    let v = ctc_value(&lp, &[1, 1], 0).unwrap();
    assert!(v.is_infinite() && v.grad.is_none());
    let mut g = Graph::new();
    let x = g.param(lp);
    assert!(matches!(ctc_loss(&mut g, x, &[1, 1], 0).unwrap(), CtcLoss::Infeasible));
    assert_eq!(min_frames(&[1, 1]), 3);
    assert_eq!(min_frames(&[1, 2, 2, 2]), 6);
}

#[test]
fn ctc_input_validation() {
    let lp = Tensor::new(vec![2, 3], vec![(1.0f64 / 3.0).ln(); 6]).unwrap();
    assert!(ctc_value(&lp, &[3], 0).is_err());
    assert!(ctc_value(&lp, &[0], 0).is_err());
    assert!(ctc_value(&lp, &[1], 3).is_err());
    let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(ctc_value(&bad, &[1], 0).is_err());
}

#[test]
fn empty_target_is_all_blank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lp = random_log_probs(&mut rng, 4, 3);
    let expected: f64 = -(0..4).map(|t| lp.at(t, 2)).sum::<f64>();
    let v = ctc_value(&lp, &[], 2).unwrap();
    assert!((v.nll - expected).abs() < 1e-12);
}

#[test]
fn matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=3);
        let blank = rng.gen_range(0..v);
        let labels: Vec<usize> = (0..v).filter(|&k| k != blank).collect();
        let target: Vec<usize> = (0..len).map(|_| labels[rng.gen_range(0..labels.len())]).collect();
        let lp = random_log_probs(&mut rng, t, v);
        let fast = ctc_value(&lp, &target, blank).unwrap().nll;
        let slow = brute_force_ctc(&lp, &target, blank);
        if slow.is_infinite() {
            assert!(fast.is_infinite(), "t={t} target={target:?}");
        } else {
            assert!((fast - slow).abs() < 1e-9, "t={t} v={v} target={target:?}: {fast} vs {slow}");
        }
        checked += 1;
    }
}

#[test]
fn ctc_gradient_check_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (t, target) in [(4usize, vec![1usize, 2]), (4, vec![1, 1]), (6, vec![2, 1, 3])] {
        let logits = Tensor::new(vec![t, 4], (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let cfg = GradCheckConfig::with_tolerance(1e-5);
        let report = grad_check(
            |g, v| {
                let lp = g.log_softmax(v[0], 1)?;
                match ctc_loss(g, lp, &target, 0).map_err(|e| crate::TensorError::Contract(e.to_string()))? {
                    CtcLoss::Finite(l) => Ok(l),
                    CtcLoss::Infeasible => unreachable!(),
                }
            },
            &[logits],
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn greedy_decode_collapses_and_drops_blanks() {
    let rows: Vec<Vec<f64>> = [0, 1, 1, 0, 1, 2, 2]
        .iter()
        .map(|&k| (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let logits = Tensor::from_rows(&rows).unwrap();
    assert_eq!(greedy_decode(&logits, 0), vec![1, 1, 2]);
}

fn routing_from(g: &mut Graph, probs: Vec<Vec<f64>>) -> Routing {
    let t = Tensor::from_rows(&probs).unwrap();
    let rec = RouterRecord::from_probs(t.clone()).unwrap();
    Routing {
        probs: g.param(t),
        record: rec,
    }
}

fn uniform(frames: usize, n: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n as f64; n]; frames]
}

fn one_hot(frames: usize, n: usize, hot: impl Fn(usize) -> usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|t| (0..n).map(|j| if j == hot(t) { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[test]
fn balancing_anchors() {
    for n in [2usize, 3, 4, 8] {
        let mut g = Graph::new();
        let mut r = routing_from(&mut g, uniform(2 * n, n));
        // round-robin dispatch with uniform probabilities
        r.record.selected = (0..2 * n).map(|t| t % n).collect();
        let l = balancing_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);

        let r = routing_from(&mut g, one_hot(5, n, |_| 0));
        let l = balancing_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - n as f64).abs() < 1e-12);
    }
}

#[test]
fn balancing_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.gen_range(2..6);
        let layers = rng.gen_range(1..4);
        let mut g = Graph::new();
        let mut routings = Vec::new();
        let mut oracle = 0.0;
        for _ in 0..layers {
            let frames = rng.gen_range(1..12);
            let probs: Vec<Vec<f64>> = (0..frames)
                .map(|_| {
                    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let mut layer = 0.0;
            for i in 0..n {
                let mut count = 0.0;
                let mut mass = 0.0;
                for row in &probs {
                    let argmax = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    if argmax == i {
                        count += 1.0;
                    }
                    mass += row[i];
                }
                layer += (count / frames as f64) * (mass / frames as f64);
            }
            oracle += n as f64 * layer / layers as f64;
            routings.push(routing_from(&mut g, probs));
        }
        let l = balancing_loss(&mut g, &routings, AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }
}

#[test]
fn sparsity_anchors() {
    let mut g = Graph::new();
    let r = routing_from(&mut g, one_hot(4, 4, |t| t % 4));
    let l = sparsity_l1_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);

    for n in [2usize, 4, 8] {
        let r = routing_from(&mut g, uniform(3, n));
        let l = sparsity_l1_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - (n as f64).sqrt()).abs() < 1e-12);
    }

    let r = routing_from(&mut g, vec![vec![0.8, 0.2]]);
    let l = sparsity_l1_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
    assert!((g.value(l).item() - 1.0 / 0.68f64.sqrt()).abs() < 1e-12);
}

#[test]
fn importance_anchors() {
    for n in [2usize, 4, 8] {
        let mut g = Graph::new();
        let r = routing_from(&mut g, uniform(3, n));
        let l = mean_importance_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let r = routing_from(&mut g, one_hot(3, n, |_| n - 1));
        let l = mean_importance_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        assert!((g.value(l).item() - n as f64).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let r = routing_from(&mut g, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let l = mean_importance_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);
}

#[test]
fn layer_aggregation_switch() {
    let mut g = Graph::new();
    let a = routing_from(&mut g, uniform(2, 2));
    let b = routing_from(&mut g, one_hot(2, 2, |_| 0));
    let mean = mean_importance_loss(&mut g, &[a.clone(), b.clone()], AuxAggregation::Mean).unwrap();
    let sum = mean_importance_loss(&mut g, &[a, b], AuxAggregation::Sum).unwrap();
    assert!((g.value(mean).item() - 1.5).abs() < 1e-12);
    assert!((g.value(sum).item() - 3.0).abs() < 1e-12);
}

#[test]
fn routing_losses_reject_empty() {
    let mut g = Graph::new();
    assert!(balancing_loss(&mut g, &[], AuxAggregation::Mean).is_err());
}

#[test]
fn routing_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    for which in 0..3 {
        let report = grad_check(
            |g, v| {
                let p = g.softmax(v[0], 1)?;
                let rec = RouterRecord::from_probs(g.value(p).clone()).unwrap();
                let r = Routing { probs: p, record: rec };
                let l = match which {
                    0 => balancing_loss(g, &[r], AuxAggregation::Mean),
                    1 => sparsity_l1_loss(g, &[r], AuxAggregation::Mean),
                    _ => mean_importance_loss(g, &[r], AuxAggregation::Mean),
                };
                l.map_err(|e| crate::TensorError::Contract(e.to_string()))
            },
            std::slice::from_ref(&logits),
            &GradCheckConfig::with_tolerance(1e-5),
        )
        .unwrap();
        assert!(report.passed, "loss {which}: {report:?}");
    }
}

#[test]
fn combine_examples() {
    let mut g = Graph::new();
    let c = |g: &mut Graph, v: f64| Some(g.param(Tensor::scalar(v)));
    let terms = LossTerms {
        recognition: g.param(Tensor::scalar(1.0)),
        sparsity: c(&mut g, 2f64.sqrt()),
        importance: c(&mut g, 1.0),
        balancing: c(&mut g, 5.0),
        embedding: c(&mut g, 2.0),
    };
    let (_, zero) = combine(&mut g, &terms, &LossWeights::zero(), LossMode::ImportanceL1).unwrap();
    assert_eq!(zero.total, 1.0);

    let w = LossWeights::default();
    let (total, b) = combine(&mut g, &terms, &w, LossMode::ImportanceL1).unwrap();
    let expected = 1.0 + 0.1 * 2f64.sqrt() + 0.1 + 0.02;
    assert!((b.total - expected).abs() < 1e-12);
    assert!((b.weighted_total(&w, LossMode::ImportanceL1) - b.total).abs() < 1e-12);
    assert_eq!(b.balancing, Some(5.0));
    g.backward(total).unwrap();
    assert!(g.grad(terms.balancing.unwrap()).is_none());

    let mut g2 = Graph::new();
    let t2 = LossTerms {
        recognition: g2.param(Tensor::scalar(1.0)),
        sparsity: None,
        importance: None,
        balancing: Some(g2.param(Tensor::scalar(5.0))),
        embedding: None,
    };
    let (_, b) = combine(&mut g2, &t2, &w, LossMode::Balancing).unwrap();
    assert!((b.total - 1.5).abs() < 1e-12);
    assert!(combine(&mut g2, &t2, &w, LossMode::BalancingL1).is_err());
}

#[test]
fn loss_weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { alpha: -0.1, ..Default::default() }.validate().is_err());
}

#[test]
fn combined_gradient_is_weighted_sum_of_term_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let w = LossWeights { alpha: 0.3, beta: 0.7, gamma: 0.0 };
    let grad_with = |w: LossWeights, recog_scale: f64| {
        let mut g = Graph::new();
        let x = g.param(logits.clone());
        let p = g.softmax(x, 1).unwrap();
        let rec = RouterRecord::from_probs(g.value(p).clone()).unwrap();
        let r = [Routing { probs: p, record: rec }];
        let lp = g.log_softmax(x, 1).unwrap();
        let CtcLoss::Finite(ctc) = ctc_loss(&mut g, lp, &[1, 2], 0).unwrap() else { unreachable!() };
        let recognition = g.scale(ctc, recog_scale);
        let terms = LossTerms {
            recognition,
            sparsity: Some(sparsity_l1_loss(&mut g, &r, AuxAggregation::Mean).unwrap()),
            importance: Some(mean_importance_loss(&mut g, &r, AuxAggregation::Mean).unwrap()),
            balancing: None,
            embedding: None,
        };
        let (total, _) = combine(&mut g, &terms, &w, LossMode::ImportanceL1).unwrap();
        g.backward(total).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let full = grad_with(w, 1.0);
    let recog = grad_with(LossWeights::zero(), 1.0);
    let sparse = grad_with(LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 }, 0.0);
    let imp = grad_with(LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0 }, 0.0);
    for i in 0..full.len() {
        let expected = recog[i] + w.alpha * sparse[i] + w.beta * imp[i];
        assert!((full[i] - expected).abs() < 1e-12);
    }
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |raw| {
        let s: f64 = raw.iter().sum();
        (s > 1e-6).then(|| raw.into_iter().map(|v| v / s).collect())
    })
}

proptest! {
    #[test]
    fn sparsity_and_importance_ranges(rows in prop::collection::vec(simplex(4), 1..8)) {
        let mut g = Graph::new();
        let r = routing_from(&mut g, rows);
        let ls = sparsity_l1_loss(&mut g, std::slice::from_ref(&r), AuxAggregation::Mean).unwrap();
        let lm = mean_importance_loss(&mut g, &[r], AuxAggregation::Mean).unwrap();
        let (ls, lm) = (g.value(ls).item(), g.value(lm).item());
        prop_assert!(ls >= 1.0 - 1e-12 && ls <= 2.0 + 1e-12);
        prop_assert!(lm >= 1.0 - 1e-12 && lm <= 4.0 + 1e-12);
    }

    #[test]
    fn sparsity_is_scale_invariant(rows in prop::collection::vec(simplex(3), 1..6), c in 0.01f64..100.0) {
        let mut g = Graph::new();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let a = g.constant(Tensor::from_rows(&rows).unwrap());
        let b = g.constant(Tensor::from_rows(&scaled).unwrap());
        let la = normalized_l1(&mut g, a).unwrap();
        let lb = normalized_l1(&mut g, b).unwrap();
        prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-12);
    }
}
