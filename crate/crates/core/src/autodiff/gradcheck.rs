use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient is
/// (near) zero are judged by absolute agreement instead of amplified noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on coordinates probed per input tensor; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckConfig {
            tolerance,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` gradients against central differences of `eval`
/// around `inputs`.
pub fn compare_with_finite_differences<E>(
    analytic: &[Tensor],
    inputs: &[Tensor],
    mut eval: impl FnMut(&[Tensor]) -> Result<f64, E>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coords_checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < x.len() => {
                let mut picked = index::sample(&mut rng, x.len(), k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..x.len()).collect(),
        };
        for c in coords {
            let orig = x.data()[c];
            probe[which].data_mut()[c] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[c] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which].data()[c];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((which, c));
            }
            report.coords_checked += 1;
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

/// Finite-difference check of a scalar function built on a [`Graph`].
///
/// `f` receives one differentiable leaf per input tensor and must return a
/// scalar node.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &leaves)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    compare_with_finite_differences(
        &analytic,
        inputs,
        |probe| {
            let mut g = Graph::new();
            let leaves: Vec<Var> = probe.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &leaves)?;
            Ok(g.value(out).item())
        },
        cfg,
    )
}

/// Single-input convenience wrapper around [`grad_check`].
pub fn grad_check_single<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let cfg = GradCheckConfig {
        step,
        tolerance,
        ..Default::default()
    };
    grad_check(|g, v| f(g, v[0]), std::slice::from_ref(x), &cfg)
}
