mod basic;
mod linalg;
mod nn;
mod pool;
mod sample;

pub use nn::{gelu_scalar, AttentionVars, GELU_COEFF};
