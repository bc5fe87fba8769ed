//! Adam optimization over window batches, and the two-stage variant.

mod adam;
mod train;

pub use adam::{adam_step, clip_norm, AdamConfig, AdamState};
pub use train::{
    batch_gradient, train, train_two_stage, train_with, TrainConfig, TrainLog, TrainLogRow, TrainOptions,
    TrainOutcome,
};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::excite::ExciteError;
use crate::flmodel::{ModelError, ModelParameters};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data set and model do not match: {0}")]
    Mismatch(String),
    #[error("non-finite gradient at step {step}, parameter {index}")]
    NonFiniteGradient { step: u64, index: usize },
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        last_good: Box<ModelParameters>,
        log: TrainLog,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] ExciteError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
