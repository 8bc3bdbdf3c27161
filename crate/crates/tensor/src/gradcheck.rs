//! Central finite-difference verification of tape gradients.

use crate::error::TensorError;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};
use thiserror::Error;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("forward failed while {stage}: {source}")]
    Forward {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("function output has {0} elements, expected a scalar")]
    NotScalar(usize),
    #[error("non-finite loss while {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    /// Flat index of the worst element per input.
    pub worst_index: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor], stage: &str) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let mut tape = Tape::new(DType::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars).map_err(|source| GradCheckError::Forward {
        stage: stage.to_string(),
        source,
    })?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(GradCheckError::NotScalar(v.len()));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(GradCheckError::NonFinite(stage.to_string()));
    }
    Ok(s)
}

/// Compare the tape gradient of the scalar function `f` against central
/// differences with step `h`, for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tolerance: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.to_dtype(DType::F64)).collect();
    let mut tape = Tape::new(DType::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).map_err(|source| GradCheckError::Forward {
        stage: "recording analytic pass".into(),
        source,
    })?;
    if tape.value(out).len() != 1 {
        return Err(GradCheckError::NotScalar(tape.value(out).len()));
    }
    let grads = tape.backward(out).map_err(|source| GradCheckError::Forward {
        stage: "back-propagating".into(),
        source,
    })?;

    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut worst_index = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut worst = (0.0, 0);
        for j in 0..inputs[i].len() {
            let mut perturbed = inputs.clone();
            let x0 = perturbed[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + h;
            let fp = eval(&f, &perturbed, &format!("perturbing input {i}[{j}] by +h"))?;
            perturbed[i].data_mut()[j] = x0 - h;
            let fm = eval(&f, &perturbed, &format!("perturbing input {i}[{j}] by -h"))?;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[j], numeric);
            if e > worst.0 {
                worst = (e, j);
            }
        }
        max_rel_err.push(worst.0);
        worst_index.push(worst.1);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        tolerance,
    })
}

/// Reduce an arbitrary output to a scalar through fixed random weights so a
/// gradient check exercises the full Jacobian rather than a plain sum.
pub fn random_projection(tape: &mut Tape, v: Var, seed: u64) -> crate::Result<Var> {
    let n = tape.value(v).len();
    let w = SeededRng::new(seed).normal_vec(n, 1.0);
    tape.dot_const(v, &w)
}
