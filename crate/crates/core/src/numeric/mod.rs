//! Dense tensors, reverse-mode autodiff and finite-difference checking.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, numeric_gradient};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}
