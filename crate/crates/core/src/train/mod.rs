//! Teacher-forced training: AdamW, warmup + cosine schedule, global-norm
//! clipping, checkpoints and the metrics log.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, Header, TensorEntry};
pub use config::{lr_at, TrainConfig};
pub use optim::{adamw_step, clip_global_norm, global_norm, OptimizerState};
pub use trainer::{checkpoint_path, MetricRecord, RunOutput, StepOutcome, TrainSummary, Trainer};
