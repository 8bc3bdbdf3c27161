//! Student and teacher networks assembled from their parts.

use vpr_tensor::{DType, Tensor, Var};

use crate::backbone::{Backbone, BackboneInit, StageOutputs};
use crate::config::{AggregatorConfig, BackboneConfig, ModelConfig};
use crate::drm::{drm_forward, init_drm, split_tokens, AlignedFeatures};
use crate::encoder::{assemble_descriptor, CrossImageEncoder};
use crate::error::Result;
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::tdda::{Aggregator, RegionDescriptorSet};

pub const BACKBONE: &str = "backbone.";
pub const DRM: &str = "drm.";
pub const AGGREGATOR: &str = "agg.";
pub const ENCODER: &str = "enc.";
pub const TEACHER: &str = "teacher.";
pub const TEACHER_AGGREGATOR: &str = "teacher_agg.";

pub struct StudentOutput {
    pub stages: StageOutputs,
    pub aligned: AlignedFeatures,
    pub regions: RegionDescriptorSet,
    /// `[B, 14·D]`, unit rows
    pub descriptor: Var,
}

pub struct StudentModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub aggregator: Aggregator,
    pub encoder: Option<CrossImageEncoder>,
}

impl StudentModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backbone: Backbone::new(cfg.backbone.clone(), BACKBONE)?,
            aggregator: Aggregator::new(cfg.aggregator.clone(), AGGREGATOR)?,
            encoder: if cfg.encoder.enabled {
                Some(CrossImageEncoder::new(cfg.encoder.clone(), ENCODER)?)
            } else {
                None
            },
            cfg,
        })
    }

    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed, dtype);
        self.backbone.init_params(&mut b, BackboneInit::Random)?;
        if self.cfg.backbone.adapter_enabled {
            self.backbone.insert_adapters(&mut b)?;
        }
        init_drm(&mut b, DRM, self.cfg.drm_in_dim(), self.cfg.aggregator.dim)?;
        self.aggregator.init_params(&mut b)?;
        if let Some(e) = &self.encoder {
            e.init_params(&mut b)?;
        }
        Ok(store)
    }

    /// Backbone and recovery projection only.
    pub fn align(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<(StageOutputs, AlignedFeatures)> {
        let stages = self.backbone.forward(ctx, images)?;
        let aligned = drm_forward(ctx, DRM, &stages, self.cfg.backbone.grid_side())?;
        Ok((stages, aligned))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<StudentOutput> {
        let (stages, aligned) = self.align(ctx, images)?;
        let regions = self.aggregator.aggregate(ctx, &aligned)?;
        let descriptor = assemble_descriptor(ctx, regions.descriptors, self.encoder.as_ref())?;
        Ok(StudentOutput {
            stages,
            aligned,
            regions,
            descriptor,
        })
    }

    /// Descriptors for a batch without gradient bookkeeping.
    pub fn describe(&self, store: &ParamStore, images: Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, images.dtype(), false);
        let x = ctx.input(images);
        let out = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(out.descriptor).clone())
    }
}

/// Frozen teacher: a plain backbone of the aggregator width plus a
/// fixed-grid aggregator for descriptor-level targets.
pub struct TeacherModel {
    pub backbone: Backbone,
    pub aggregator: Aggregator,
}

impl TeacherModel {
    pub fn new(backbone: BackboneConfig, aggregator: AggregatorConfig) -> Result<Self> {
        let aggregator = AggregatorConfig {
            mode: "identity".into(),
            ..aggregator
        };
        Ok(Self {
            backbone: Backbone::new(backbone, TEACHER)?,
            aggregator: Aggregator::new(aggregator, TEACHER_AGGREGATOR)?,
        })
    }

    pub fn for_student(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.teacher_backbone(), cfg.aggregator.clone())
    }

    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed, dtype);
        self.backbone.init_params(&mut b, BackboneInit::Random)?;
        self.aggregator.init_params(&mut b)?;
        store.set_trainable(|_| true, false);
        Ok(store)
    }

    /// Last-stage tokens `[B, 1+P, D]`.
    pub fn tokens(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<Var> {
        Ok(self.backbone.forward(ctx, images)?.last())
    }

    /// Fixed-grid descriptor of the last-stage tokens, `[B, 14·D]`.
    pub fn descriptor(&self, ctx: &mut Ctx<'_>, tokens: Var) -> Result<Var> {
        let side = self.backbone.cfg.grid_side();
        let aligned = split_tokens(ctx, tokens, side, side)?;
        let set = self.aggregator.aggregate(ctx, &aligned)?;
        assemble_descriptor(ctx, set.descriptors, None)
    }
}
