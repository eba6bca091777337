//! The ContextLM model: chunk layout, mean pooling, the autoregressive
//! context predictor, broadcast fusion and the teacher-forced forward pass.

pub mod config;
pub mod forward;
pub mod layout;
pub mod params;
pub mod pathway;

pub use config::{CInit, Mode, ModelConfig};
pub use forward::{
    broadcast_fuse, forward, logits, loss, loss_and_grads, pool_contexts, predict_contexts, BlockRecord,
    ForwardOptions, ForwardTrace, Stack, TokenBatch,
};
pub use layout::{build_chunk_layout, ChunkLayout};
pub use params::{decays, BoundParams, ModelParams, ParamIndex};
pub use pathway::{grad_pathway_report, PathwayReport, PathwayResiduals};
