//! Acoustic-model building blocks: expert feed-forward networks, the top-1
//! router, the routed MoE layer, FSMN-style memory blocks, multi-head
//! self-attention and the shared embedding network.

mod attention;
mod embedding;
mod expert;
mod linear;
mod memory;
mod moe;
mod router;

pub use attention::MultiHeadAttention;
pub use embedding::EmbeddingNet;
pub use expert::ExpertFfn;
pub use linear::Linear;
pub use memory::{MemoryBlock, MemoryShape};
pub use moe::{moe_forward, MoeLayer};
pub use router::{Router, RouterMode, RouterRecord, Routing};
