//! Recovery projection: fuse the four stage outputs into the teacher width
//! and split the result into a class vector and a spatial map.

use vpr_tensor::Var;

use crate::backbone::{check_stage_shapes, StageOutputs};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamBuilder};

/// Student tokens in the teacher width, plus their spatial view.
#[derive(Debug, Clone, Copy)]
pub struct AlignedFeatures {
    /// `[B, 1+P, D]`
    pub tokens: Var,
    /// `[B, D, h, w]`; `map[b,:,r,c]` is token `1 + r·w + c`.
    pub map: Var,
    /// `[B, D]`
    pub class: Var,
    pub map_h: usize,
    pub map_w: usize,
}

pub fn init_drm(b: &mut ParamBuilder<'_>, prefix: &str, in_dim: usize, out_dim: usize) -> Result<()> {
    b.linear(&format!("{prefix}proj"), in_dim, out_dim, Init::FanIn(in_dim))
}

/// Split a `[B, 1+h·w, D]` token sequence into class vector and row-major map.
pub fn split_tokens(ctx: &mut Ctx<'_>, tokens: Var, map_h: usize, map_w: usize) -> Result<AlignedFeatures> {
    let s = ctx.tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != 1 + map_h * map_w {
        return Err(Error::Dimension(format!(
            "token shape {s:?} does not hold a {map_h}×{map_w} map plus class token"
        )));
    }
    let (b, d) = (s[0], s[2]);
    let t = &mut ctx.tape;
    let class = t.slice(tokens, 1, 0, 1)?;
    let class = t.reshape(class, &[b, d])?;
    let patches = t.slice(tokens, 1, 1, map_h * map_w)?;
    let patches = t.reshape(patches, &[b, map_h, map_w, d])?;
    let map = t.permute(patches, &[0, 3, 1, 2])?;
    Ok(AlignedFeatures {
        tokens,
        map,
        class,
        map_h,
        map_w,
    })
}

/// Concatenate stages shallow to deep along features, project, and split.
pub fn drm_forward(ctx: &mut Ctx<'_>, prefix: &str, stages: &StageOutputs, map_side: usize) -> Result<AlignedFeatures> {
    check_stage_shapes(ctx, stages)?;
    let cat = ctx.tape.concat(&stages.stages, 2)?;
    let w = ctx.p(&format!("{prefix}proj.w"))?;
    let bias = ctx.p(&format!("{prefix}proj.b"))?;
    if ctx.tape.shape(w)[0] != ctx.tape.shape(cat)[2] {
        return Err(Error::Dimension(format!(
            "fused width {} does not match projection input {}",
            ctx.tape.shape(cat)[2],
            ctx.tape.shape(w)[0]
        )));
    }
    let tokens = ctx.tape.linear(cat, w, Some(bias))?;
    split_tokens(ctx, tokens, map_side, map_side)
}
