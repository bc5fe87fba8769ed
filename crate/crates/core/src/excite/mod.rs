//! Excitation inputs, initial-condition sampling, data sets and windows.

mod dataset;
mod signal;
mod windows;

pub use dataset::{
    generate_dataset, initial_condition_ranges, sample_in, sample_initial_condition, Dataset, DatasetSpec,
    DivergenceRecord, Manifest, TrajectoryRecord,
};
pub use signal::{eval_input, ExcitationSignal, SignalSpec};
pub use windows::{make_windows, Window, WindowRef, WindowSampler};

use thiserror::Error;

use crate::plants::PlantError;

#[derive(Debug, Error)]
pub enum ExciteError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("{diverged} of {total} trajectories diverged (limit 1%)")]
    TooManyDiverged { diverged: usize, total: usize },
    #[error("window length m = {m} does not fit a trajectory of {len} samples")]
    WindowTooLong { m: usize, len: usize },
    #[error("corrupt data set: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
