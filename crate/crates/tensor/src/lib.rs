//! Dense `f64` tensors, a recording tape with reverse-mode differentiation, and a
//! finite-difference gradient checker.
//!
//! Every differentiable computation is recorded on a [`Tape`]: ops take and return
//! [`Var`] handles, and [`Tape::backward`] writes gradients into leaves created with
//! `requires_grad`. Broadcasting is explicit ([`Tape::broadcast_to`]); elementwise
//! binary ops require identical shapes.

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{CustomBackward, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

/// Pointwise activations exposed for code that evaluates them outside a tape.
pub mod scalar {
    pub use crate::kernels::{gelu, sigmoid, softplus};
}
