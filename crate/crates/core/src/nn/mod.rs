//! Small float64 numerical layer: parameter containers, LSTM and dense
//! layers with hand-written reverse-mode gradients, SGD and finite-difference
//! gradient checking.

mod dense;
mod gradcheck;
mod lstm;
mod optim;
mod rng;
mod tensor;

pub use dense::DenseParams;
pub use gradcheck::{grad_check, grad_check_coords};
pub use lstm::{lstm_step, lstm_step_backward, lstm_step_cached, GateParams, LstmCellParams, LstmStepCache};
pub use optim::{clip_global_norm, sgd_step};
pub use rng::RngState;
pub use tensor::{Matrix, ParamVector, Parameterized, TensorKind, TensorSpec};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("gradient contains non-finite values")]
    NonfiniteGradient,
}

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
