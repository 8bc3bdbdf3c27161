//! Sources of distillation targets.

use vpr_tensor::{DType, Tensor};

use super::select_rows;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TeacherModel;
use crate::params::{Ctx, ParamStore};

pub struct TeacherTargets {
    /// `[B, 1+P, D]`
    pub tokens: Tensor,
    /// `[B, 14·D]` when requested.
    pub descriptor: Option<Tensor>,
}

pub enum TeacherOracle {
    /// A frozen network evaluated on the fly.
    InProcess { model: TeacherModel, params: ParamStore },
    /// Targets computed elsewhere, indexed like the training images.
    Precomputed {
        tokens: Tensor,
        descriptors: Option<Tensor>,
    },
}

impl TeacherOracle {
    /// Randomly initialized frozen teacher matching the student's geometry.
    pub fn toy(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let model = TeacherModel::for_student(cfg)?;
        let params = model.init_params(seed, dtype)?;
        Ok(Self::InProcess { model, params })
    }

    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Self::InProcess { params, .. } => Some(params),
            Self::Precomputed { .. } => None,
        }
    }

    /// Targets for the images at `idx` of the training set `images`.
    pub fn targets(&self, images: &Tensor, idx: &[usize], descriptor: bool) -> Result<TeacherTargets> {
        match self {
            Self::InProcess { model, params } => {
                let mut ctx = Ctx::new(params, images.dtype(), false);
                let x = ctx.input(select_rows(images, idx)?);
                let tok = model.tokens(&mut ctx, x)?;
                let desc = if descriptor {
                    let d = model.descriptor(&mut ctx, tok)?;
                    Some(ctx.tape.value(d).clone())
                } else {
                    None
                };
                Ok(TeacherTargets {
                    tokens: ctx.tape.value(tok).clone(),
                    descriptor: desc,
                })
            }
            Self::Precomputed { tokens, descriptors } => {
                let descriptor = match (descriptor, descriptors) {
                    (false, _) => None,
                    (true, Some(d)) => Some(select_rows(d, idx)?),
                    (true, None) => {
                        return Err(Error::Data("precomputed teacher has no descriptor targets".into()));
                    }
                };
                Ok(TeacherTargets {
                    tokens: select_rows(tokens, idx)?,
                    descriptor,
                })
            }
        }
    }
}
