use crate::error::{cfg_err, dim_err, Result};
use crate::tape::{Tape, Var};

/// √(2/π), the tanh-approximation GELU coefficient.
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_COEFF: f64 = 0.044_715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Weights of one multi-head self-attention block: fused `qkv` projection
/// `[d, 3d]` and output projection `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl Tape {
    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("softmax", &shape, &[]))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.custom(
            "softmax",
            &[x],
            shape,
            out,
            Box::new(move |args| {
                let y = args.output.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), or) in args.grad.chunks(d).zip(y.chunks(d)).zip(g.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// GELU, tanh approximation (see [`gelu_scalar`]).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.custom(
            "gelu",
            &[x],
            shape,
            data,
            Box::new(|args| {
                let xd = args.inputs[0].data();
                vec![Some(args.grad.iter().zip(xd).map(|(g, &v)| g * gelu_grad(v)).collect())]
            }),
        )
    }

    /// Layer normalization over the trailing axis, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(cfg_err("layer_norm", "eps must be positive"));
        }
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gd[j] * h + bd[j]);
            }
        }
        self.custom(
            "layer_norm",
            &[x, gamma, beta],
            shape,
            out,
            Box::new(move |args| {
                let gd = args.inputs[1].data();
                let g = args.grad;
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                }
                vec![gx, Some(gg), Some(gb)]
            }),
        )
    }

    /// Same-padded 2-D cross-correlation. `x`: `[B,C,H,W]`, `kernel`:
    /// `[Cout,C,k,k]` with odd `k`, `bias`: `[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if ks[2].is_multiple_of(2) {
            return Err(cfg_err("conv2d", format!("kernel size {} must be odd", ks[2])));
        }
        if self.shape(bias) != [ks[0]] {
            return Err(dim_err("conv2d", &ks, self.shape(bias)));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ks[0], ks[2]);
        let pad = (k / 2) as isize;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![0.0; b * co * h * w];
        for bi in 0..b {
            for o in 0..co {
                let ob = &mut out[(bi * co + o) * h * w..(bi * co + o + 1) * h * w];
                ob.iter_mut().for_each(|v| *v = bd[o]);
                for ci in 0..c {
                    let xb = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let kv = kd[((o * c + ci) * k + ky) * k + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xx in 0..w {
                                    let sx = xx as isize + dx;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    ob[y * w + xx] += kv * xb[sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.custom(
            "conv2d",
            &[x, kernel, bias],
            vec![b, co, h, w],
            out,
            Box::new(move |args| {
                let xd = args.inputs[0].data();
                let kd = args.inputs[1].data();
                let g = args.grad;
                let mut gx = args.needs[0].then(|| vec![0.0; b * c * h * w]);
                let mut gk = args.needs[1].then(|| vec![0.0; co * c * k * k]);
                for bi in 0..b {
                    for o in 0..co {
                        let gb = &g[(bi * co + o) * h * w..(bi * co + o + 1) * h * w];
                        for ci in 0..c {
                            let xoff = (bi * c + ci) * h * w;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let kidx = ((o * c + ci) * k + ky) * k + kx;
                                    let kv = kd[kidx];
                                    let dy = ky as isize - pad;
                                    let dx = kx as isize - pad;
                                    let mut acc_k = 0.0;
                                    for y in 0..h {
                                        let sy = y as isize + dy;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for xx in 0..w {
                                            let sx = xx as isize + dx;
                                            if sx < 0 || sx >= w as isize {
                                                continue;
                                            }
                                            let src = xoff + sy as usize * w + sx as usize;
                                            let gv = gb[y * w + xx];
                                            acc_k += gv * xd[src];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[src] += gv * kv;
                                            }
                                        }
                                    }
                                    if let Some(gk) = gk.as_mut() {
                                        gk[kidx] += acc_k;
                                    }
                                }
                            }
                        }
                    }
                }
                let gbias = args.needs[2].then(|| {
                    let mut gbias = vec![0.0; co];
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        gbias[i % co] += chunk.iter().sum::<f64>();
                    }
                    gbias
                });
                vec![gx, gk, gbias]
            }),
        )
    }

    /// `v / max(‖v‖₂, eps)` over the trailing axis; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("l2_normalize", &shape, &[]))?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|v| v / denom));
        }
        self.custom(
            "l2_normalize",
            &[x],
            shape,
            out,
            Box::new(move |args| {
                let y = args.output.data();
                let mut gx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &args.grad[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let o = &mut gx[r * d..(r + 1) * d];
                    if n > eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            o[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            o[j] = gr[j] / eps;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Multi-head self-attention over `[B, T, d]` followed by the output
    /// projection. Tokens attend within their own batch entry only.
    pub fn mhsa(&mut self, x: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(dim_err("mhsa", &xs, &[0, 0, 0]));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(cfg_err("mhsa", format!("dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let qkv = self.linear(x, p.qkv_w, Some(p.qkv_b))?;
        let qkv = self.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = self.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = self.slice(qkv, 0, 0, 1)?;
        let k = self.slice(qkv, 0, 1, 1)?;
        let v = self.slice(qkv, 0, 2, 1)?;
        let q = self.reshape(q, &[b * heads, t, dh])?;
        let k = self.reshape(k, &[b * heads, t, dh])?;
        let v = self.reshape(v, &[b * heads, t, dh])?;
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = self.softmax(scores)?;
        let ctx = self.bmm(attn, v, false)?;
        let ctx = self.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, p.proj_w, Some(p.proj_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new(DType::F64);
        let g = tape.constant(Tensor::full(&[3], 1.0, DType::F64));
        let b = tape.constant(Tensor::zeros(&[3], DType::F64));
        let x = tape.constant(Tensor::full(&[3], 1.0, DType::F64));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.0]);

        let g2 = tape.constant(Tensor::full(&[2], 1.0, DType::F64));
        let b2 = tape.constant(Tensor::zeros(&[2], DType::F64));
        for a in [0.5, 3.0, 100.0] {
            let x = tape.constant(Tensor::from_vec(&[2], vec![-a, a]).unwrap());
            let y = tape.layer_norm(x, g2, b2, 1e-6).unwrap();
            let v = tape.data(y);
            assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5, "{v:?}");
        }
    }

    #[test]
    fn conv_one_by_one_scales() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0, DType::F64));
        let k = tape.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1], DType::F64));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.data(y), &[2.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new(DType::F64);
        let xv = Tensor::from_vec(&[1, 1, 3, 4], (0..12).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let x = tape.constant(xv.clone());
        let mut kv = vec![0.0; 9];
        kv[4] = 1.0;
        let k = tape.constant(Tensor::from_vec(&[1, 1, 3, 3], kv).unwrap());
        let b = tape.constant(Tensor::zeros(&[1], DType::F64));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.data(y), xv.data());
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3], DType::F64));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3], DType::F64));
        let b = tape.constant(Tensor::zeros(&[1], DType::F64));
        assert!(matches!(
            tape.conv2d(x, k, b),
            Err(crate::TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn l2_examples() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        assert!((tape.data(y)[0] - 0.6).abs() < 1e-15 && (tape.data(y)[1] - 0.8).abs() < 1e-15);
        let z = tape.constant(Tensor::zeros(&[3], DType::F64));
        let zy = tape.l2_normalize(z, 1e-12).unwrap();
        assert_eq!(tape.data(zy), &[0.0; 3]);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.constant(Tensor::zeros(&[1, 2, 6], DType::F64));
        let p = AttentionVars {
            qkv_w: tape.constant(Tensor::zeros(&[6, 18], DType::F64)),
            qkv_b: tape.constant(Tensor::zeros(&[18], DType::F64)),
            proj_w: tape.constant(Tensor::zeros(&[6, 6], DType::F64)),
            proj_b: tape.constant(Tensor::zeros(&[6], DType::F64)),
        };
        assert!(matches!(tape.mhsa(x, &p, 4), Err(crate::TensorError::Config { .. })));
    }
}
