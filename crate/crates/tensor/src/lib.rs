//! Minimal dense-tensor substrate: a [`Tensor`] type, a recorded reverse-mode
//! [`Tape`], the handful of differentiable ops the place-recognition model
//! needs, and a finite-difference [`grad_check`] harness.

mod error;
pub mod gradcheck;
mod ops;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, random_projection, GradCheckError, GradCheckReport};
pub use ops::{gelu_scalar, AttentionVars, GELU_COEFF};
pub use rng::SeededRng;
pub use tape::{BackwardArgs, BackwardFn, Gradients, Tape, Var};
pub use tensor::{numel, DType, Tensor};
