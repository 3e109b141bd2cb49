//! Optimization loop, validation, routing statistics and training history.

mod eval;
mod history;
mod optim;
mod stats;
mod train;

pub use eval::{edit_distance, evaluate, token_error_rate, EvalReport};
pub use history::{HistoryRow, HistoryWriter, HISTORY_HEADER};
pub use optim::{Optimizer, OptimizerConfig};
pub use stats::{collect_route_stats, LayerStats, RouteStats};
pub use train::{train, TrainConfig, TrainObserver, TrainOutcome, TrainStatus};
