use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::TensorError;
use crate::tensor::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Contracts `y` with fixed pseudo-random weights so every output coordinate
/// contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = random(g.shape(y), seed ^ 0xabcd);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::new();
    let eye = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(mat(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let v = g.constant(mat(&[&[5.0], &[7.0]]));
    let out = g.matmul(p, v).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = [random(&[3, 4], 1), random(&[4, 2], 2)];
    let report = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 3)
        },
        &inputs,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.coords_checked, 20);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 4]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);

    let x = g.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[0], 1.0);
    assert!(d[1] >= 0.0 && d[1] < 1e-300);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
    assert!(matches!(g.softmax(x, 0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_over_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 1.0]]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5; 4]);
    assert!(matches!(g.softmax(x, 2), Err(TensorError::Axis { axis: 2, rank: 2 })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = g.l2_normalize(x, 0, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    assert!(g.concat(&[a, b], 1).is_err());
}

#[test]
fn l2_normalize_of_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 0.0]));
    let y = g.l2_normalize(x, 0, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn concat_feature_axis() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0], &[2.0]]));
    let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 3]);
    assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 5));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let x = random(&[3, 5], 9);
    let report = grad_check_single(
        |g, v| {
            let y = g.softmax(v, 1)?;
            Ok(g.sum_all(y))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_abs_err < 1e-9);
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var, TensorError>);

fn op_cases() -> Vec<Case> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        ("add_scalar", vec![vec![3, 4], vec![1]], |g, v| g.add(v[1], v[0])),
        ("sub_row", vec![vec![3, 4], vec![4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |g, v| g.mul(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4], vec![1]], |g, v| g.mul(v[0], v[1])),
        ("square", vec![vec![3, 4]], |g, v| Ok(g.square(v[0]))),
        ("exp", vec![vec![3, 4]], |g, v| Ok(g.exp(v[0]))),
        ("log", vec![vec![3, 4]], |g, v| {
            let s = g.square(v[0]);
            let one = g.constant(Tensor::scalar(1.0));
            let p = g.add(s, one)?;
            Ok(g.log(p))
        }),
        ("relu", vec![vec![3, 4]], |g, v| Ok(g.relu(v[0]))),
        ("scale", vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], -2.5))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("softmax_last", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("softmax_first", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
        ("log_softmax", vec![vec![3, 4]], |g, v| g.log_softmax(v[0], 1)),
        ("l2_normalize", vec![vec![3, 4]], |g, v| g.l2_normalize(v[0], 1, 1e-12)),
        ("concat0", vec![vec![2, 4], vec![3, 4]], |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![3, 2], vec![3, 4]], |g, v| g.concat(&[v[0], v[1], v[0]], 1)),
        ("sum_axis", vec![vec![3, 4]], |g, v| g.sum_axis(v[0], 0)),
        ("mean_axis", vec![vec![3, 4]], |g, v| g.mean_axis(v[0], 1)),
        ("slice_cols", vec![vec![3, 4]], |g, v| g.slice_cols(v[0], 1, 3)),
        ("gather_rows", vec![vec![3, 4]], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        ("scatter_rows", vec![vec![2, 4]], |g, v| g.scatter_rows(v[0], &[3, 1], 5)),
        ("shift_back", vec![vec![5, 2]], |g, v| g.shift_rows(v[0], -2)),
        ("shift_ahead", vec![vec![5, 2]], |g, v| g.shift_rows(v[0], 1)),
        ("row_scale", vec![vec![3, 4], vec![3]], |g, v| g.row_scale(v[0], v[1])),
        ("pick_per_row", vec![vec![3, 4]], |g, v| g.pick_per_row(v[0], &[3, 0, 1])),
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    for (seed, (name, shapes, op)) in op_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random(s, 100 * seed as u64 + i as u64))
            .collect();
        let report = grad_check(
            |g, v| {
                let y = op(g, v)?;
                project(g, y, seed as u64)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn sampled_coordinates_are_bounded() {
    let inputs = [random(&[10, 10], 3)];
    let cfg = GradCheckConfig {
        max_coords: Some(7),
        ..Default::default()
    };
    let report = grad_check(|g, v| Ok(g.sum_all(v[0])), &inputs, &cfg).unwrap();
    assert_eq!(report.coords_checked, 7);
    assert!(report.passed);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x0 = random(&[3, 4], seed);
        let grad_of = |wf: f64, wg: f64| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let f = {
                let s = g.softmax(x, 1).unwrap();
                project(&mut g, s, seed).unwrap()
            };
            let h = {
                let sq = g.square(x);
                project(&mut g, sq, seed + 1).unwrap()
            };
            let fa = g.scale(f, wf);
            let hb = g.scale(h, wg);
            let total = g.add(fa, hb).unwrap();
            g.backward(total).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gh = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            prop_assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::new();
            let a = g.param(random(&[4, 3], seed));
            let b = g.param(random(&[3, 5], seed + 7));
            let m = g.matmul(a, b).unwrap();
            let s = g.log_softmax(m, 1).unwrap();
            let l = g.sum_all(s);
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(a).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
