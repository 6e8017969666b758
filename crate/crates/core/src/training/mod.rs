//! Optimization: learning-rate schedule, AdamW, checkpoints, and the
//! pretraining loop.

pub mod checkpoint;
mod config;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{AblationConfig, DataConfig, EvalConfig, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamW, AdamWHyper, Moments};
pub use schedule::lr_schedule;
pub use trainer::{
    forward_losses, load_model, pretrain, read_model, resolve_vocab, write_model, ForwardOut, MetricRecord,
    PretrainReport, Trainer, FINAL_CHECKPOINT, METRICS_FILE,
};
