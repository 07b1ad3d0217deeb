//! The toy model and its staged training.

pub mod model;
pub mod optim;
pub mod stage;
pub mod train;

pub use model::{model_forward, ModelConfig, ToyModel};
pub use optim::{lr_at, AdamW, AdamWConfig};
pub use stage::{apply_stage_mask, StageConfig, StageId};
pub use train::{run_schedule, train_stage, RunReport, TrainConfig};
