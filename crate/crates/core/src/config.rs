//! Model configuration and presets.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

pub const NUM_STAGES: usize = 4;
/// 1 global + 2×2 medium + 3×3 small regions.
pub const NUM_REGIONS: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub adapter_enabled: bool,
    pub adapter_rank: usize,
    pub ln_eps: f64,
}

impl BackboneConfig {
    /// ViT-S/14 sized student at 224².
    pub fn full_student() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            patch_size: 14,
            image_size: 224,
            adapter_enabled: true,
            adapter_rank: 256,
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/14 sized teacher at 224².
    pub fn full_teacher() -> Self {
        Self {
            embed_dim: 768,
            heads: 12,
            adapter_enabled: false,
            ..Self::full_student()
        }
    }

    /// Small test backbone: 28² images, 14-pixel patches (P = 4).
    pub fn toy(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 14,
            image_size: 28,
            adapter_enabled: true,
            adapter_rank: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.depth / NUM_STAGES
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || !self.depth.is_multiple_of(NUM_STAGES) {
            return Err(config(format!(
                "depth {} must be a positive multiple of {NUM_STAGES}",
                self.depth
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.adapter_enabled && self.adapter_rank == 0 {
            return Err(config("adapter rank must be positive"));
        }
        if self.mlp_ratio == 0 || self.ln_eps <= 0.0 {
            return Err(config("mlp ratio and layer-norm eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    /// Feature width D (the teacher width).
    pub dim: usize,
    pub generator_hidden: usize,
    /// Sampling-grid side per level: global, medium, small.
    pub grid_sizes: [usize; 3],
    pub gem_p_init: f64,
    pub gem_eps: f64,
    /// Deformation strategy name (`deformable` or `identity`).
    pub mode: String,
}

impl AggregatorConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            generator_hidden: 64,
            grid_sizes: [8, 4, 3],
            gem_p_init: 3.0,
            gem_eps: 1e-6,
            mode: "deformable".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.generator_hidden == 0 || self.grid_sizes.iter().any(|&g| g < 2) {
            return Err(config("aggregator dims must be positive and grids at least 2×2"));
        }
        if !(self.gem_p_init > 0.0) || !(self.gem_eps > 0.0) {
            return Err(config("GeM p and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub enabled: bool,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn full() -> Self {
        Self {
            enabled: true,
            layers: 2,
            model_dim: 768,
            heads: 16,
            ff_dim: 2048,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(config(format!(
                "encoder dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return Err(config("encoder needs at least one layer and a positive ff width"));
        }
        Ok(())
    }
}

/// Student model: backbone, recovery projection into the teacher width,
/// aggregator and cross-image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub aggregator: AggregatorConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full_student(),
            aggregator: AggregatorConfig::new(768),
            encoder: EncoderConfig::full(),
        }
    }

    /// End-to-end desk preset: 28² images with 7-pixel patches give a 4×4
    /// feature map, the smallest that supports the 3×3 region split with
    /// distinct small regions. Student width 16, teacher width 32.
    pub fn toy() -> Self {
        let backbone = BackboneConfig {
            patch_size: 7,
            ..BackboneConfig::toy(16)
        };
        Self {
            backbone,
            aggregator: AggregatorConfig {
                generator_hidden: 8,
                ..AggregatorConfig::new(32)
            },
            encoder: EncoderConfig {
                enabled: true,
                layers: 1,
                model_dim: 32,
                heads: 4,
                ff_dim: 64,
                ln_eps: 1e-5,
            },
        }
    }

    /// Teacher backbone matching this student: same geometry, width D.
    pub fn teacher_backbone(&self) -> BackboneConfig {
        let d = self.aggregator.dim;
        BackboneConfig {
            embed_dim: d,
            heads: self.backbone.heads * (d / self.backbone.embed_dim).max(1),
            adapter_enabled: false,
            ..self.backbone.clone()
        }
    }

    pub fn drm_in_dim(&self) -> usize {
        NUM_STAGES * self.backbone.embed_dim
    }

    pub fn descriptor_dim(&self) -> usize {
        NUM_REGIONS * self.aggregator.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.aggregator.validate()?;
        self.encoder.validate()?;
        if self.encoder.model_dim != self.aggregator.dim {
            return Err(config(format!(
                "encoder width {} must equal aggregator width {}",
                self.encoder.model_dim, self.aggregator.dim
            )));
        }
        if self.backbone.grid_side() < 3 {
            return Err(config(format!(
                "feature map {0}×{0} is smaller than the 3×3 region split",
                self.backbone.grid_side()
            )));
        }
        Ok(())
    }
}
