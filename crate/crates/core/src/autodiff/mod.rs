//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{
    compare_with_finite_differences, grad_check, grad_check_single, relative_error, GradCheckConfig,
    GradCheckReport, REL_ERR_FLOOR,
};
pub use graph::{Graph, Var};

#[cfg(test)]
mod tests;
