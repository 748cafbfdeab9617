//! Masked-language-model pretraining: warmup/cosine schedule, AdamW with
//! decoupled weight decay, phased context growth and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod schedule;
mod train;

pub use checkpoint::{peek_value_width, Checkpoint, Progress};
pub use gradcheck::{model_grad_check, toy_fixture};
pub use optim::{clip_grad_norm, AdamWConfig, OptimState};
pub use schedule::{lr_at, ScheduleConfig};
pub use crate::data::Corpus;
pub use train::{mlm_loss, Phase, PhasePlan, StepMetrics, TrainConfig, Trainer};
