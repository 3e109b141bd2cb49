//! Preset configurations, the assembled acoustic model, its cost model and
//! checkpoint format.

mod checkpoint;
mod config;
mod cost;
mod network;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, PRESETS};
pub use cost::{count_flops, count_params, ComponentCost, CostReport, FlopConvention, FRAMES_PER_SECOND};
pub use network::{BackboneLayer, BatchLoss, FeedForward, ForwardOutput, Model, UtteranceOutput};

#[cfg(test)]
mod tests;
