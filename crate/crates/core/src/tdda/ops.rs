//! Differentiable building blocks of the aggregator.

use vpr_tensor::{DType, Tensor, Var};

use super::roi::{assign_smalls, Level, RoiSpec};
use crate::config::NUM_REGIONS;
use crate::error::{Error, Result};
use crate::params::Ctx;

/// Bound on the activated offsets; scales lie in `1 ± OFFSET_BOUND`.
pub const OFFSET_BOUND: f64 = 0.5;

/// `[F ; broadcast(class)]` along channels: `[B,D,h,w] + [B,D] -> [B,2D,h,w]`.
pub fn fuse_class_token(ctx: &mut Ctx<'_>, map: Var, class: Var) -> Result<Var> {
    let ms = ctx.tape.shape(map).to_vec();
    let cs = ctx.tape.shape(class).to_vec();
    if ms.len() != 4 || cs != [ms[0], ms[1]] {
        return Err(Error::Dimension(format!(
            "class vector {cs:?} does not match map {ms:?}"
        )));
    }
    let cb = ctx.tape.broadcast_spatial(class, ms[2], ms[3])?;
    Ok(ctx.tape.concat(&[map, cb], 1)?)
}

/// Two-layer conv head predicting the raw `(Δx, Δy, s_w, s_h)` field.
pub fn deformable_generator(ctx: &mut Ctx<'_>, prefix: &str, fused: Var) -> Result<Var> {
    let w1 = ctx.p(&format!("{prefix}conv1.w"))?;
    let b1 = ctx.p(&format!("{prefix}conv1.b"))?;
    let w2 = ctx.p(&format!("{prefix}conv2.w"))?;
    let b2 = ctx.p(&format!("{prefix}conv2.b"))?;
    let h = ctx.tape.conv2d(fused, w1, b1)?;
    let h = ctx.tape.gelu(h)?;
    Ok(ctx.tape.conv2d(h, w2, b2)?)
}

fn batch_grid(base: &Tensor, batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(base.len() * batch);
    for _ in 0..batch {
        data.extend_from_slice(base.data());
    }
    let s = base.shape();
    Tensor::new(&[batch, s[0], s[1], s[2]], data, DType::F64).expect("grid shape")
}

/// Interpolate the raw field at the region's base lattice and apply the
/// bounded activations. Returns `[B,4,g,g]`.
pub fn sample_roi_params(ctx: &mut Ctx<'_>, field: Var, roi: &RoiSpec) -> Result<Var> {
    let fs = ctx.tape.shape(field).to_vec();
    if fs.len() != 4 || fs[1] != 4 {
        return Err(Error::Dimension(format!(
            "deformation field must be [B,4,h,w], got {fs:?}"
        )));
    }
    let grid = ctx.input(batch_grid(&roi.base_grid(fs[2], fs[3]), fs[0]));
    let raw = ctx.tape.grid_sample(field, grid)?;
    let t = &mut ctx.tape;
    let off = t.slice(raw, 1, 0, 2)?;
    let off = t.tanh(off)?;
    let off = t.affine(off, OFFSET_BOUND, 0.0)?;
    let sc = t.slice(raw, 1, 2, 2)?;
    let sc = t.tanh(sc)?;
    let sc = t.affine(sc, OFFSET_BOUND, 1.0)?;
    Ok(t.concat(&[off, sc], 1)?)
}

/// Identity parameters `(0, 0, 1, 1)` for a batch.
pub fn identity_params(batch: usize, grid: usize) -> Tensor {
    let n = grid * grid;
    let mut data = Vec::with_capacity(batch * 4 * n);
    for _ in 0..batch {
        for ch in 0..4 {
            data.extend(std::iter::repeat_n(if ch < 2 { 0.0 } else { 1.0 }, n));
        }
    }
    Tensor::new(&[batch, 4, grid, grid], data, DType::F64).expect("param shape")
}

/// Deformed lattice in normalized map coordinates, `[B,g,g,2]`:
/// `x = x_c + (x_rel·s_w + Δx)·w/2`, likewise for y.
pub fn deform_grid(ctx: &mut Ctx<'_>, params: Var, roi: &RoiSpec, map_h: usize, map_w: usize) -> Result<Var> {
    let ps = ctx.tape.shape(params).to_vec();
    let g = roi.grid;
    if ps != [ps[0], 4, g, g] {
        return Err(Error::Dimension(format!(
            "region parameters {ps:?} do not match a {g}×{g} lattice"
        )));
    }
    let b = ps[0];
    let rel = roi.rel_coords();
    let mut xr = Vec::with_capacity(b * g * g);
    let mut yr = Vec::with_capacity(b * g * g);
    for _ in 0..b {
        for &ry in &rel {
            for &rx in &rel {
                xr.push(rx);
                yr.push(ry);
            }
        }
    }
    let xr = ctx.input(Tensor::new(&[b, 1, g, g], xr, DType::F64)?);
    let yr = ctx.input(Tensor::new(&[b, 1, g, g], yr, DType::F64)?);
    let (cx, cy) = roi.center();
    let (mw, mh) = (map_w as f64, map_h as f64);
    let t = &mut ctx.tape;
    let mut axis = |rel: Var, off_ch: usize, scale_ch: usize, c: f64, extent: f64, size: f64| -> Result<Var> {
        let s = t.slice(params, 1, scale_ch, 1)?;
        let d = t.slice(params, 1, off_ch, 1)?;
        let v = t.mul(rel, s)?;
        let v = t.add(v, d)?;
        let v = t.affine(v, extent / size, 2.0 * c / size - 1.0)?;
        Ok(t.reshape(v, &[b, g, g, 1])?)
    };
    let gx = axis(xr, 0, 2, cx, roi.width(), mw)?;
    let gy = axis(yr, 1, 3, cy, roi.height(), mh)?;
    Ok(ctx.tape.concat(&[gx, gy], 3)?)
}

/// Mean deformed position per batch element, in map coordinates.
pub fn grid_centers(grid: &Tensor, map_h: usize, map_w: usize) -> Vec<(f64, f64)> {
    let s = grid.shape();
    let n = s[1] * s[2];
    grid.data()
        .chunks(n * 2)
        .map(|pts| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for xy in pts.chunks(2) {
                sx += xy[0];
                sy += xy[1];
            }
            let (gx, gy) = (sx / n as f64, sy / n as f64);
            ((gx + 1.0) * map_w as f64 / 2.0, (gy + 1.0) * map_h as f64 / 2.0)
        })
        .collect()
}

/// Bilinear lookup of the map at the lattice, then GeM over the samples.
pub fn pool_region(ctx: &mut Ctx<'_>, map: Var, grid: Var, p: Var, eps: f64) -> Result<Var> {
    let s = ctx.tape.grid_sample(map, grid)?;
    Ok(ctx.tape.gem_pool(s, p, eps)?)
}

/// Small-region → medium-region index per batch element.
pub fn assignment(centers: &[Vec<(f64, f64)>], rois: &[RoiSpec]) -> Vec<Vec<usize>> {
    let batch = centers.first().map_or(0, Vec::len);
    let mediums = &rois[Level::Medium.offset()..Level::Small.offset()];
    (0..batch)
        .map(|b| {
            let sc: Vec<(f64, f64)> = (Level::Small.offset()..NUM_REGIONS).map(|r| centers[r][b]).collect();
            assign_smalls(&sc, mediums)
        })
        .collect()
}

fn linear(ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    Ok(ctx.tape.linear(x, w, Some(b))?)
}

/// Residual fusion bottom-up: each medium gains a projection of the mean of
/// its assigned smalls (none assigned: unchanged), then the global region
/// gains a projection of the mean of the fused mediums. `regions`: `[B,14,D]`.
pub fn downtop_fuse(ctx: &mut Ctx<'_>, prefix: &str, regions: Var, assign: &[Vec<usize>]) -> Result<Var> {
    let s = ctx.tape.shape(regions).to_vec();
    let (b, d) = (s[0], s[2]);
    if assign.len() != b {
        return Err(Error::Dimension(format!(
            "{} assignments for batch of {b}",
            assign.len()
        )));
    }
    let mut pick = vec![0.0; b * 4 * 9];
    let mut mask = vec![0.0; b * 4 * d];
    for (bi, a) in assign.iter().enumerate() {
        for m in 0..4 {
            let members: Vec<usize> = (0..9).filter(|&k| a[k] == m).collect();
            for &k in &members {
                pick[(bi * 4 + m) * 9 + k] = 1.0 / members.len() as f64;
            }
            if !members.is_empty() {
                mask[(bi * 4 + m) * d..(bi * 4 + m + 1) * d].fill(1.0);
            }
        }
    }
    let pick = ctx.input(Tensor::new(&[b, 4, 9], pick, DType::F64)?);
    let mask = ctx.input(Tensor::new(&[b, 4, d], mask, DType::F64)?);
    let quarter = ctx.input(Tensor::full(&[b, 1, 4], 0.25, DType::F64));
    let t = &mut ctx.tape;
    let global = t.slice(regions, 1, 0, 1)?;
    let medium = t.slice(regions, 1, 1, 4)?;
    let small = t.slice(regions, 1, 5, 9)?;
    let small_mean = t.bmm(pick, small, false)?;
    let up = linear(ctx, small_mean, &format!("{prefix}medium"))?;
    let t = &mut ctx.tape;
    let up = t.mul(up, mask)?;
    let medium = t.add(medium, up)?;
    let medium_mean = t.bmm(quarter, medium, false)?;
    let up = linear(ctx, medium_mean, &format!("{prefix}global"))?;
    let global = ctx.tape.add(global, up)?;
    Ok(ctx.tape.concat(&[global, medium, small], 1)?)
}

/// Add a per-level projection of each region's flattened deformation
/// parameters. `params[r]`: `[B,4,g,g]` in canonical region order.
pub fn deform_pos_embed(ctx: &mut Ctx<'_>, prefix: &str, regions: Var, params: &[Var]) -> Result<Var> {
    let b = ctx.tape.shape(regions)[0];
    let mut parts = Vec::with_capacity(3);
    for level in Level::ALL {
        let name = format!("{prefix}{}", level.name());
        let w_in = ctx.p(&format!("{name}.w")).map(|w| ctx.tape.shape(w)[0])?;
        let mut flat = Vec::with_capacity(level.count());
        for r in level.offset()..level.offset() + level.count() {
            let n: usize = ctx.tape.shape(params[r])[1..].iter().product();
            if n != w_in {
                return Err(crate::error::config(format!(
                    "{} position embedding expects {w_in} inputs, region {r} has {n}",
                    level.name()
                )));
            }
            flat.push(ctx.tape.reshape(params[r], &[b, 1, n])?);
        }
        let flat = ctx.tape.concat(&flat, 1)?;
        let pe = linear(ctx, flat, &name)?;
        let x = ctx.tape.slice(regions, 1, level.offset(), level.count())?;
        parts.push(ctx.tape.add(x, pe)?);
    }
    Ok(ctx.tape.concat(&parts, 1)?)
}
