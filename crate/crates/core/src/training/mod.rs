//! Training: configuration, schedule, sampling, optimiser and the loop.

mod config;
mod optim;
mod sampler;
mod schedule;
mod trainer;

pub use config::{Method, TrainConfig};
pub use optim::Sgd;
pub use sampler::{chunk_frames, epoch_batches, eval_frames, time_major, PkBatch, TrainSet};
pub use schedule::{lr_at, Rates};
pub use trainer::{
    meta_entries, model_config, Checkpoint, StepLosses, Trainer, CONFIG_FILE, FINAL_CHECKPOINT, LOSSES_FILE,
};
