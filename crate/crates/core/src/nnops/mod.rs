//! Differentiable primitives on a define-by-run tape.
//!
//! Every model component is composed from the ops in this module; each op
//! records a vector-Jacobian product so that [`Tape::backward`] yields
//! gradients for every parameter read during the forward pass.

mod activation;
mod conv;
mod norm;
mod params;
mod real;
mod resample;
mod structural;
mod tape;
mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use activation::{sigmoid_scalar, softmax_forward, Activation};
pub use conv::{conv2d_forward, ConvGeometry};
pub use norm::{NormMode, RunningUpdate, BN_MOMENTUM, NORM_EPS};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use resample::{bilinear_taps, resize_bilinear, Tap};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("loss does not depend on any value that requires a gradient")]
    Detached,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
