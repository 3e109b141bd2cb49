//! Recognition (CTC) and auxiliary routing objectives.

mod combine;
mod ctc;
mod routing;

pub use combine::{combine, LossBreakdown, LossMode, LossTerms, LossWeights};
pub use ctc::{ctc_loss, ctc_value, greedy_decode, min_frames, CtcLoss, CtcValue};
pub use routing::{
    balancing_loss, mean_importance_loss, normalized_l1, sparsity_l1_loss, AuxAggregation, L2_EPS,
};

#[cfg(test)]
mod tests;
