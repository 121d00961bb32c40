//! Minimal differentiable layers with explicit forward and backward passes.
//!
//! Every layer works on a batch laid out row-major with the batch index
//! outermost; a single sample is a batch of one. Backward functions
//! accumulate parameter gradients into caller-provided tensors and return
//! the gradient with respect to the layer input.

mod adam;
mod conv;
mod dense;
mod gradcheck;
mod linalg;
mod lstm;
mod ops;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dCache};
pub use dense::{dense_backward, dense_forward};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::gemm;
pub use lstm::{lstm_backward, lstm_forward, lstm_sequence, LstmCache, LstmParams};
pub use ops::{
    dropout, dropout_backward, mse_loss, relu, relu_backward, sigmoid, DropoutMask,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T, NeuralError> {
    Err(NeuralError::Shape(msg.into()))
}
