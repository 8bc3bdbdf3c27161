//! Cross-image transformer over region slots, and final descriptor assembly.

use vpr_tensor::{AttentionVars, Var};

use crate::config::{EncoderConfig, NUM_REGIONS};
use crate::error::{config, Result};
use crate::params::{Ctx, Init, ParamBuilder};

/// Norm floor for descriptor normalization.
pub const DESCRIPTOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CrossImageEncoder {
    pub cfg: EncoderConfig,
    prefix: String,
}

impl CrossImageEncoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, layer: usize, s: &str) -> String {
        format!("{}layers.{layer}.{s}", self.prefix)
    }

    pub fn init_params(&self, b: &mut ParamBuilder<'_>) -> Result<()> {
        let (d, ff) = (self.cfg.model_dim, self.cfg.ff_dim);
        for l in 0..self.cfg.layers {
            b.layer_norm(&self.name(l, "ln1"), d)?;
            b.linear(&self.name(l, "attn.qkv"), d, 3 * d, Init::FanIn(d))?;
            b.linear(&self.name(l, "attn.proj"), d, d, Init::FanIn(d))?;
            b.layer_norm(&self.name(l, "ln2"), d)?;
            b.linear(&self.name(l, "ff.fc1"), d, ff, Init::FanIn(d))?;
            b.linear(&self.name(l, "ff.fc2"), ff, d, Init::FanIn(ff))?;
        }
        Ok(())
    }

    fn linear(&self, ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
        let w = ctx.p(&format!("{name}.w"))?;
        let b = ctx.p(&format!("{name}.b"))?;
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }

    fn norm(&self, ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
        let g = ctx.p(&format!("{name}.g"))?;
        let b = ctx.p(&format!("{name}.b"))?;
        Ok(ctx.tape.layer_norm(x, g, b, self.cfg.ln_eps)?)
    }

    /// `[B,14,D] -> [B,14,D]`. Each region slot attends across the images of
    /// the batch; there is no positional signal over the batch axis.
    pub fn encode(&self, ctx: &mut Ctx<'_>, regions: Var) -> Result<Var> {
        let s = ctx.tape.shape(regions).to_vec();
        if s.len() != 3 || s[1] != NUM_REGIONS || s[2] != self.cfg.model_dim {
            return Err(config(format!(
                "encoder expects [B, {NUM_REGIONS}, {}], got {s:?}",
                self.cfg.model_dim
            )));
        }
        let mut x = ctx.tape.permute(regions, &[1, 0, 2])?;
        for l in 0..self.cfg.layers {
            let h = self.norm(ctx, x, &self.name(l, "ln1"))?;
            let attn = AttentionVars {
                qkv_w: ctx.p(&self.name(l, "attn.qkv.w"))?,
                qkv_b: ctx.p(&self.name(l, "attn.qkv.b"))?,
                proj_w: ctx.p(&self.name(l, "attn.proj.w"))?,
                proj_b: ctx.p(&self.name(l, "attn.proj.b"))?,
            };
            let a = ctx.tape.mhsa(h, &attn, self.cfg.heads)?;
            x = ctx.tape.add(x, a)?;
            let h = self.norm(ctx, x, &self.name(l, "ln2"))?;
            let h = self.linear(ctx, h, &self.name(l, "ff.fc1"))?;
            let h = ctx.tape.gelu(h)?;
            let h = self.linear(ctx, h, &self.name(l, "ff.fc2"))?;
            x = ctx.tape.add(x, h)?;
        }
        Ok(ctx.tape.permute(x, &[1, 0, 2])?)
    }
}

/// Optionally encode, then flatten the 14 slots and L2-normalize: `[B, 14·D]`.
pub fn assemble_descriptor(ctx: &mut Ctx<'_>, regions: Var, encoder: Option<&CrossImageEncoder>) -> Result<Var> {
    let x = match encoder {
        Some(e) => e.encode(ctx, regions)?,
        None => regions,
    };
    let s = ctx.tape.shape(x).to_vec();
    let flat = ctx.tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(ctx.tape.l2_normalize(flat, DESCRIPTOR_EPS)?)
}
