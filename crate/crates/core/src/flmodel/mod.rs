//! The learnable feedback linearization: α and β nets, the invertible
//! coupling transform φ with its affine output layer, the linear pair
//! `(A, B)`, multi-step prediction and the training losses.

mod arch;
mod checkpoint;
mod loss;
mod model;
mod predict;

pub use arch::{
    brunovsky_zoh, init_params, Architecture, CouplingSlot, DenseSlot, InputLaw, Layout, ModelMeta,
    ModelParameters, NetSlot, TensorSlot,
};
pub use loss::{
    batch_loss, controllability_matrix, inverse_det_floor, loss_l1, loss_l2, loss_l3, loss_l4, loss_wl,
    pair_terms, total_loss, LossBreakdown, LossConfig,
};
pub use model::{mlp, GaugeTransformed, Linearization, ModelView};
#[cfg(test)]
pub(crate) use model::tests::{exact_chain_model, random_model};
pub use predict::{predict_step, predict_window, rollout_open_loop, Prediction, RolloutMode};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Linear(#[from] DiffError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
