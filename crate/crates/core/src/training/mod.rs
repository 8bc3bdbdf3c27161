//! Two-stage training: feature distillation, then metric fine-tuning.

mod loss;
mod optim;
mod stages;
mod teacher;

pub use loss::{ms_loss, ms_mine, mse_distill_loss, LossConfig, MinedSets};
pub use optim::{optimizers, Adam, OptimConfig, Optimizer};
pub use stages::{
    distill_stage, evaluate_ms_loss, finetune_stage, place_batches, DistillConfig, FinetuneConfig, LossCurve,
};
pub use teacher::{TeacherOracle, TeacherTargets};

use vpr_tensor::Tensor;

use crate::error::{Error, Result};

/// Rows `idx` of `t` along the leading axis.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(Error::Data(format!("row {i} out of range for {n} rows")));
        }
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(&shape, data, t.dtype())?)
}
