//! Contrastive fine-tuning on co-citation pairs.

mod config;
mod loss;
mod optim;
mod run;
mod schedule;
mod trainer;

pub use config::{Scheduler, TrainConfig};
pub use loss::{mnr_loss, TemperatureParam};
pub use optim::{clip_grad_norm, AdamW};
pub use run::{training_loop, EarlyStopping, HistoryRecord, TrainOutcome, Verdict};
pub use schedule::lr_schedule;
pub use trainer::{StepLosses, TrainBatch, Trainer};
