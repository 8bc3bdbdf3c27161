//! Multi-scale region aggregation with class-conditioned deformable
//! sampling, GeM pooling, bottom-up fusion and a deformation-aware
//! position embedding.

mod ops;
mod roi;

use vpr_tensor::{Tensor, Var};

pub use ops::{
    assignment, deform_grid, deform_pos_embed, deformable_generator, downtop_fuse, fuse_class_token, grid_centers,
    identity_params, pool_region, sample_roi_params, OFFSET_BOUND,
};
pub use roi::{assign_smalls, build_pyramid_rois, Level, RoiSpec};

use crate::config::{AggregatorConfig, NUM_REGIONS};
use crate::drm::AlignedFeatures;
use crate::error::Result;
use crate::params::{Ctx, Init, ParamBuilder};
use crate::registry::Registry;

/// How the per-region `(Δx, Δy, s_w, s_h)` lattices are produced.
pub trait DeformationMode: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the mode owns a learned generator.
    fn learned(&self) -> bool;

    /// Activated parameters `[B,4,g,g]` per region, canonical order.
    fn region_params(
        &self,
        ctx: &mut Ctx<'_>,
        prefix: &str,
        feats: &AlignedFeatures,
        rois: &[RoiSpec],
    ) -> Result<Vec<Var>>;
}

/// Offsets and scales predicted from the map fused with the class token.
pub struct Deformable;

impl DeformationMode for Deformable {
    fn name(&self) -> &'static str {
        "deformable"
    }

    fn learned(&self) -> bool {
        true
    }

    fn region_params(
        &self,
        ctx: &mut Ctx<'_>,
        prefix: &str,
        feats: &AlignedFeatures,
        rois: &[RoiSpec],
    ) -> Result<Vec<Var>> {
        let fused = fuse_class_token(ctx, feats.map, feats.class)?;
        let field = deformable_generator(ctx, &format!("{prefix}gen."), fused)?;
        rois.iter().map(|r| sample_roi_params(ctx, field, r)).collect()
    }
}

/// Fixed grids: zero offsets, unit scales.
pub struct Identity;

impl DeformationMode for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn learned(&self) -> bool {
        false
    }

    fn region_params(
        &self,
        ctx: &mut Ctx<'_>,
        _prefix: &str,
        feats: &AlignedFeatures,
        rois: &[RoiSpec],
    ) -> Result<Vec<Var>> {
        let b = ctx.tape.shape(feats.map)[0];
        Ok(rois.iter().map(|r| ctx.input(identity_params(b, r.grid))).collect())
    }
}

pub fn deformation_modes() -> Registry<dyn DeformationMode, AggregatorConfig> {
    let mut r: Registry<dyn DeformationMode, AggregatorConfig> = Registry::new("deformation mode");
    r.register("deformable", |_| Ok(Box::new(Deformable) as Box<dyn DeformationMode>));
    r.register("identity", |_| Ok(Box::new(Identity) as Box<dyn DeformationMode>));
    r
}

/// What happened to one region during aggregation.
#[derive(Debug, Clone)]
pub struct RegionMeta {
    pub roi: RoiSpec,
    /// `[B,4,g,g]`
    pub params: Var,
    /// `[B,g,g,2]`, normalized coordinates
    pub grid: Var,
    /// Deformed centre per batch element, map coordinates.
    pub centers: Vec<(f64, f64)>,
}

/// Fourteen region descriptors `[B,14,D]` in canonical order.
#[derive(Debug, Clone)]
pub struct RegionDescriptorSet {
    pub descriptors: Var,
    pub regions: Vec<RegionMeta>,
    /// Medium index of each small region, per batch element.
    pub assignment: Vec<Vec<usize>>,
}

pub struct Aggregator {
    pub cfg: AggregatorConfig,
    prefix: String,
    mode: Box<dyn DeformationMode>,
}

impl Aggregator {
    pub fn new(cfg: AggregatorConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let mode = deformation_modes().create(&cfg.mode, &cfg)?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
            mode,
        })
    }

    pub fn mode(&self) -> &dyn DeformationMode {
        self.mode.as_ref()
    }

    pub fn init_params(&self, b: &mut ParamBuilder<'_>) -> Result<()> {
        let (d, c, pre) = (self.cfg.dim, self.cfg.generator_hidden, &self.prefix);
        if self.mode.learned() {
            b.add(format!("{pre}gen.conv1.w"), &[c, 2 * d, 1, 1], Init::FanIn(2 * d))?;
            b.add(format!("{pre}gen.conv1.b"), &[c], Init::Zeros)?;
            b.add(format!("{pre}gen.conv2.w"), &[4, c, 3, 3], Init::Zeros)?;
            b.add(format!("{pre}gen.conv2.b"), &[4], Init::Zeros)?;
        }
        for level in Level::ALL {
            b.add(
                format!("{pre}gem_p.{}", level.name()),
                &[1],
                Init::Const(self.cfg.gem_p_init),
            )?;
        }
        b.linear(&format!("{pre}fuse.medium"), d, d, Init::FanIn(d))?;
        b.linear(&format!("{pre}fuse.global"), d, d, Init::FanIn(d))?;
        for level in Level::ALL {
            let g = self.cfg.grid_sizes[level.index()];
            let n = 4 * g * g;
            b.linear(&format!("{pre}pe.{}", level.name()), n, d, Init::FanIn(n))?;
        }
        Ok(())
    }

    /// Region pooling, fusion and position embedding, in that order.
    pub fn aggregate(&self, ctx: &mut Ctx<'_>, feats: &AlignedFeatures) -> Result<RegionDescriptorSet> {
        let (h, w) = (feats.map_h, feats.map_w);
        let rois = build_pyramid_rois(h, w, self.cfg.grid_sizes)?;
        let params = self.mode.region_params(ctx, &self.prefix, feats, &rois)?;
        let mut pooled = Vec::with_capacity(NUM_REGIONS);
        let mut regions = Vec::with_capacity(NUM_REGIONS);
        for (roi, &prm) in rois.iter().zip(&params) {
            let grid = deform_grid(ctx, prm, roi, h, w)?;
            let p = ctx.p(&format!("{}gem_p.{}", self.prefix, roi.level.name()))?;
            let v = pool_region(ctx, feats.map, grid, p, self.cfg.gem_eps)?;
            let b = ctx.tape.shape(v)[0];
            pooled.push(ctx.tape.reshape(v, &[b, 1, self.cfg.dim])?);
            regions.push(RegionMeta {
                roi: *roi,
                params: prm,
                grid,
                centers: grid_centers(ctx.tape.value(grid), h, w),
            });
        }
        let stacked = ctx.tape.concat(&pooled, 1)?;
        let centers: Vec<Vec<(f64, f64)>> = regions.iter().map(|r| r.centers.clone()).collect();
        let assign = assignment(&centers, &rois);
        let fused = downtop_fuse(ctx, &format!("{}fuse.", self.prefix), stacked, &assign)?;
        let descriptors = deform_pos_embed(ctx, &format!("{}pe.", self.prefix), fused, &params)?;
        Ok(RegionDescriptorSet {
            descriptors,
            regions,
            assignment: assign,
        })
    }
}

/// Values of one region's parameters, for reports.
pub fn region_param_values(ctx: &Ctx<'_>, meta: &RegionMeta) -> Tensor {
    ctx.tape.value(meta.params).clone()
}
