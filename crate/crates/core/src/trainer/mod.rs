//! SGD training over random patches with schedules, checkpointing and a
//! per-epoch log.

mod config;
mod optimizer;
mod patch;
mod train;

pub use config::{TrainConfig, DEFAULT_PATCH};
pub use optimizer::{sgd_momentum_step, OptimizerState};
pub use patch::{
    augment_flip, flip_frontal, patch_at, sample_corner, sample_patch, PatchGeometry, PatchSample,
};
pub use train::{
    train, train_step, train_with, validate, write_log, ArtifactWriter, EpochLog, EpochSettings,
    TrainObserver, TrainOutcome, Validation, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
