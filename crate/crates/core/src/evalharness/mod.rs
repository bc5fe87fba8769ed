//! Evaluation of learned linearizations: single-step accuracy, open-loop
//! drift against analytic baselines, noise robustness, reports on the
//! learned linear pair and pole-placement regulation of the true plant.

mod closed_loop;
mod linear;
mod report;
mod rollout;

pub use closed_loop::{closed_loop_sim, run_feedback, ClosedLoopMetrics, ClosedLoopOutcome, ClosedLoopSpec, RunMetrics};
pub use linear::{
    characteristic_polynomial, closed_loop_matrix, eigenvalues, linear_report, matrix_polynomial, pole_place,
    polynomial_from_roots, polynomial_roots, LinearReport, Pole,
};
pub use report::{write_report_csv, EvaluationReport, ReportSummary, Variant, REPORT_HEADER};
pub use rollout::{
    evaluate_analytic, evaluate_learned, fresh_trajectories, held_out_samples, noise_eval, rollout_eval,
    single_step_eval, sweep_samples, EvalSet, EvalTrajectories, SingleStepReport, SingleStepSample,
};

use thiserror::Error;

use crate::analytic::AnalyticError;
use crate::diffcore::DiffError;
use crate::excite::ExciteError;
use crate::flmodel::ModelError;
use crate::plants::PlantError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error("model and plant do not match: {0}")]
    Mismatch(String),
    #[error("pair is not controllable (det Γ = {det_gamma:e})")]
    Uncontrollable { det_gamma: f64 },
    #[error("invalid pole set: {0}")]
    InvalidPoles(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Data(#[from] ExciteError),
    #[error(transparent)]
    Linear(#[from] DiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
