//! Command-line driver: data generation, training and evaluation runs
//! configured by a strict JSON [`config::RunConfig`].

pub mod config;
mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::execute;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Training(_) => 4,
            CliError::Evaluation(_) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flforge", version, about = "Learn and evaluate feedback linearizations from sampled trajectories")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the global seed (as does FLFORGE_SEED; the flag wins).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the training data set.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Record zero-input trajectories (first stage of two-stage training).
        #[arg(long)]
        zero_input: bool,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Train a model on a generated data set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Data set directory (default: <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint (optimizer moments restart).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Zero-input first stage, then the full model with γ frozen.
        #[arg(long)]
        two_stage: bool,
        /// Zero-input data set for the first stage (default: simulated).
        #[arg(long)]
        zero_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(subcommand)]
        kind: EvalCommand,
    },
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint (default: <out>/model.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of evaluation trajectories.
    #[arg(long)]
    pub trajectories: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// One-step prediction errors on held-out samples.
    SingleStep {
        #[command(flatten)]
        eval: EvalCommon,
    },
    /// Open-loop drift against the analytic baselines.
    Rollout {
        #[command(flatten)]
        eval: EvalCommon,
    },
    /// Drift under measurement or process noise.
    Noise {
        #[command(flatten)]
        eval: EvalCommon,
        #[arg(long, value_parser = ["measurement", "process"])]
        mode: Option<String>,
        #[arg(long)]
        variance: Option<f64>,
    },
    /// Eigenvalues and determinants of the learned linear pair.
    LinearReport {
        #[command(flatten)]
        eval: EvalCommon,
    },
    /// Pole placement on the learned pair, run on the true plant.
    ClosedLoop {
        #[command(flatten)]
        eval: EvalCommon,
        /// Comma-separated real poles.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        poles: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xeq: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Drift of the analytic linearization alone.
    Analytic {
        #[command(flatten)]
        eval: EvalCommon,
        /// Use the documented parameter perturbation.
        #[arg(long)]
        perturbed: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Config(e.to_string())),
    }
}
