//! Minimal differentiable-numerics core: dense tensors, MLPs with analytic
//! gradients, standard losses, and the Adam optimizer.
//!
//! Only what the rest of the crate needs is implemented: fully-connected
//! networks with relu/tanh hidden layers and linear, sigmoid, or gaussian
//! output heads. No general computation graph.

mod adam;
mod loss;
mod mlp;
mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamHyperParams, AdamState};
pub use loss::{loss_bce, loss_gaussian_nll, loss_kl_diag_gaussian, loss_mse, BCE_PROB_EPS};
pub use mlp::{
    mlp_backward, mlp_forward, mlp_forward_cached, Activation, ForwardCache, Gradients, LayerParams,
    MlpSpec, OutputHead, ParamBlock, VARIANCE_CEIL, VARIANCE_FLOOR,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

pub type Result<T> = std::result::Result<T, NdError>;
