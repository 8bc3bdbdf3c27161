//! Closed-form parameter and FLOP counts, and comparison against reference
//! figures.

use serde::{Deserialize, Serialize};

use crate::config::{BackboneConfig, ModelConfig, NUM_REGIONS, NUM_STAGES};
use crate::tdda::{deformation_modes, Level};

/// Per-element costs of non-matmul work, in FLOPs.
pub mod cost {
    /// Layer norm and softmax.
    pub const NORM: u64 = 5;
    /// Tanh-approximated GELU.
    pub const GELU: u64 = 8;
    /// Residual and bias additions.
    pub const ADD: u64 = 1;
    /// One bilinear tap per channel: four multiplies and three adds.
    pub const BILINEAR: u64 = 7;
    /// Clamp, power and accumulate in GeM.
    pub const GEM: u64 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComponentBreakdown {
    pub adapter: u64,
    pub backbone: u64,
    pub drm: u64,
    pub aggregator: u64,
    pub encoder: u64,
}

impl ComponentBreakdown {
    pub fn total_without_encoder(&self) -> u64 {
        self.adapter + self.backbone + self.drm + self.aggregator
    }

    pub fn total(&self) -> u64 {
        self.total_without_encoder() + self.encoder
    }
}

fn linear(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

/// Backbone parameters excluding adapters.
pub fn backbone_params(c: &BackboneConfig) -> u64 {
    let d = c.embed_dim;
    let stem = linear(c.patch_dim(), d) + d as u64 + (c.num_tokens() * d) as u64;
    let block = 4 * d as u64 + linear(d, 3 * d) + linear(d, d) + linear(d, c.mlp_dim()) + linear(c.mlp_dim(), d);
    stem + c.depth as u64 * block
}

pub fn adapter_params(c: &BackboneConfig) -> u64 {
    if !c.adapter_enabled {
        return 0;
    }
    c.depth as u64 * (linear(c.embed_dim, c.adapter_rank) + linear(c.adapter_rank, c.embed_dim))
}

pub fn count_params(cfg: &ModelConfig) -> ComponentBreakdown {
    let a = &cfg.aggregator;
    let d = a.dim;
    let learned = deformation_modes()
        .create(&a.mode, a)
        .map(|m| m.learned())
        .unwrap_or(false);
    let generator = if learned {
        (2 * d * a.generator_hidden + a.generator_hidden + 9 * a.generator_hidden * 4 + 4) as u64
    } else {
        0
    };
    let pe: u64 = Level::ALL
        .iter()
        .map(|l| linear(4 * a.grid_sizes[l.index()].pow(2), d))
        .sum();
    let e = &cfg.encoder;
    let m = e.model_dim;
    let layer = 4 * m as u64 + linear(m, 3 * m) + linear(m, m) + linear(m, e.ff_dim) + linear(e.ff_dim, m);
    ComponentBreakdown {
        adapter: adapter_params(&cfg.backbone),
        backbone: backbone_params(&cfg.backbone),
        drm: linear(cfg.drm_in_dim(), d),
        aggregator: generator + 3 + 2 * linear(d, d) + pe,
        encoder: if e.enabled { e.layers as u64 * layer } else { 0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub patch_embed: u64,
    pub blocks: u64,
    pub adapters: u64,
    pub drm: u64,
    pub aggregator: u64,
    pub encoder: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.blocks + self.adapters + self.drm + self.aggregator + self.encoder
    }
}

/// FLOPs of one pre-norm transformer block over `t` tokens of width `d`
/// (two per multiply-accumulate).
pub fn block_flops(t: u64, d: u64, heads: u64, mlp: u64) -> u64 {
    let norms = 2 * cost::NORM * t * d;
    let qkv = 2 * t * d * 3 * d + t * 3 * d;
    let scores = 2 * t * t * d;
    let softmax = cost::NORM * heads * t * t;
    let mix = 2 * t * t * d;
    let proj = 2 * t * d * d + t * d;
    let mlp_cost = 2 * 2 * t * d * mlp + t * (mlp + d) + cost::GELU * t * mlp;
    let residual = 2 * cost::ADD * t * d;
    norms + qkv + scores + softmax + mix + proj + mlp_cost + residual
}

/// Forward cost for a batch of `batch` images.
pub fn estimate_flops(cfg: &ModelConfig, with_encoder: bool, batch: usize) -> FlopsBreakdown {
    let c = &cfg.backbone;
    let b = batch as u64;
    let (t, dim) = (c.num_tokens() as u64, c.embed_dim as u64);
    let p = c.num_patches() as u64;
    let a = &cfg.aggregator;
    let (d, hidden) = (a.dim as u64, a.generator_hidden as u64);
    let hw = p;
    let adapters = if c.adapter_enabled {
        let r = c.adapter_rank as u64;
        c.depth as u64 * (2 * 2 * t * dim * r + t * (r + dim) + cost::GELU * t * r + cost::ADD * t * dim)
    } else {
        0
    };
    let generator = 2 * hw * 2 * d * hidden + hw * hidden + cost::GELU * hw * hidden + 2 * hw * hidden * 4 * 9 + hw * 4;
    let pooling: u64 = Level::ALL
        .iter()
        .map(|l| {
            let g2 = a.grid_sizes[l.index()].pow(2) as u64;
            l.count() as u64 * (g2 * d * (cost::BILINEAR + cost::GEM) + 2 * 4 * g2 * d)
        })
        .sum();
    let fusion = 5 * (2 * d * d + d);
    let per_image = FlopsBreakdown {
        patch_embed: 2 * p * c.patch_dim() as u64 * dim + p * dim,
        blocks: c.depth as u64 * block_flops(t, dim, c.heads as u64, c.mlp_dim() as u64),
        adapters,
        drm: 2 * t * NUM_STAGES as u64 * dim * d + t * d,
        aggregator: generator + pooling + fusion,
        encoder: 0,
    };
    let mut total = FlopsBreakdown {
        patch_embed: per_image.patch_embed * b,
        blocks: per_image.blocks * b,
        adapters: per_image.adapters * b,
        drm: per_image.drm * b,
        aggregator: per_image.aggregator * b,
        encoder: 0,
    };
    let e = &cfg.encoder;
    if with_encoder && e.enabled {
        // each region slot is a sequence of `batch` tokens
        let slots = NUM_REGIONS as u64;
        let per_slot = block_flops(b, e.model_dim as u64, e.heads as u64, e.ff_dim as u64);
        total.encoder = e.layers as u64 * slots * per_slot;
    }
    total
}

/// One line of a comparison against a reference figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub ours: f64,
    pub reference: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub within: bool,
}

impl ComparisonRow {
    pub fn new(name: &str, ours: f64, reference: f64, tolerance: f64) -> Self {
        let rel_err = (ours - reference) / reference;
        Self {
            name: name.to_string(),
            ours,
            reference,
            rel_err,
            tolerance,
            within: rel_err.abs() <= tolerance,
        }
    }
}

/// Reference parameter counts (millions), FLOPs (billions) and descriptor
/// size for the full-size configuration, with the accepted tolerances.
pub fn reference_comparison(cfg: &ModelConfig) -> Vec<ComparisonRow> {
    let p = count_params(cfg);
    let m = |v: u64| v as f64 / 1e6;
    let flops = estimate_flops(cfg, false, 1).total() as f64 / 1e9;
    vec![
        ComparisonRow::new("adapter_params_m", m(p.adapter), 2.30, 0.10),
        ComparisonRow::new("backbone_params_m", m(p.backbone), 22.16, 0.05),
        ComparisonRow::new("drm_params_m", m(p.drm), 1.17, 0.02),
        ComparisonRow::new("aggregator_params_m", m(p.aggregator), 1.58, 0.10),
        ComparisonRow::new("encoder_params_m", m(p.encoder), 11.03, 0.02),
        ComparisonRow::new("total_no_encoder_params_m", m(p.total_without_encoder()), 27.21, 0.05),
        ComparisonRow::new("total_params_m", m(p.total()), 38.24, 0.05),
        ComparisonRow::new("gflops_no_encoder", flops, 9.05, 0.15),
        ComparisonRow::new("descriptor_dim", cfg.descriptor_dim() as f64, 10752.0, 0.0),
    ]
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut s =
        String::from("| quantity | ours | reference | rel. error | tolerance | ok |\n|---|---:|---:|---:|---:|:-:|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:+.2}% | {:.0}% | {} |\n",
            r.name,
            r.ours,
            r.reference,
            100.0 * r.rel_err,
            100.0 * r.tolerance,
            if r.within { "yes" } else { "no" }
        ));
    }
    s
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("quantity,ours,reference,rel_err,tolerance,within\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.ours, r.reference, r.rel_err, r.tolerance, r.within
        ));
    }
    s
}
