use crate::error::{dim_err, Result};
use crate::tape::{Tape, Var};

/// One axis of a bilinear lookup: lower index, upper index, upper weight,
/// and d(pixel)/d(normalized) (zero when the coordinate was clamped).
#[derive(Debug, Clone, Copy)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
    dpix: f64,
}

/// Align-corners mapping: `-1` hits the first pixel, `+1` the last;
/// coordinates outside the map are clamped to the border.
fn axis_tap(coord: f64, size: usize) -> AxisTap {
    if size == 1 {
        return AxisTap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            dpix: 0.0,
        };
    }
    let max = (size - 1) as f64;
    let raw = (coord + 1.0) * 0.5 * max;
    let (u, dpix) = if raw < 0.0 {
        (0.0, 0.0)
    } else if raw > max {
        (max, 0.0)
    } else {
        (raw, 0.5 * max)
    };
    let lo = (u.floor() as usize).min(size - 2);
    AxisTap {
        lo,
        hi: lo + 1,
        frac: u - lo as f64,
        dpix,
    }
}

impl Tape {
    /// Bilinear sampling of `feat` (`[B,C,H,W]`) at normalized `(x, y)`
    /// locations `grid` (`[B,H',W',2]`), giving `[B,C,H',W']`. Gradients
    /// flow to both the features and the grid.
    pub fn grid_sample(&mut self, feat: Var, grid: Var) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        let gs = self.shape(grid).to_vec();
        if fs.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != fs[0] {
            return Err(dim_err("grid_sample", &fs, &gs));
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let (ho, wo) = (gs[1], gs[2]);
        let npts = ho * wo;
        let gd = self.data(grid);
        let taps: Vec<(AxisTap, AxisTap)> = gd
            .chunks(2)
            .map(|xy| (axis_tap(xy[0], w), axis_tap(xy[1], h)))
            .collect();
        let fd = self.data(feat);
        let mut out = vec![0.0; b * c * npts];
        for bi in 0..b {
            for ch in 0..c {
                let plane = &fd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                let o = &mut out[(bi * c + ch) * npts..(bi * c + ch + 1) * npts];
                for (pi, (tx, ty)) in taps[bi * npts..(bi + 1) * npts].iter().enumerate() {
                    let top = (1.0 - tx.frac) * plane[ty.lo * w + tx.lo] + tx.frac * plane[ty.lo * w + tx.hi];
                    let bot = (1.0 - tx.frac) * plane[ty.hi * w + tx.lo] + tx.frac * plane[ty.hi * w + tx.hi];
                    o[pi] = (1.0 - ty.frac) * top + ty.frac * bot;
                }
            }
        }
        self.custom(
            "grid_sample",
            &[feat, grid],
            vec![b, c, ho, wo],
            out,
            Box::new(move |args| {
                let fd = args.inputs[0].data();
                let g = args.grad;
                let mut gf = args.needs[0].then(|| vec![0.0; b * c * h * w]);
                let mut gg = args.needs[1].then(|| vec![0.0; b * npts * 2]);
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * h * w;
                        let plane = &fd[base..base + h * w];
                        let gpl = &g[(bi * c + ch) * npts..(bi * c + ch + 1) * npts];
                        for (pi, (tx, ty)) in taps[bi * npts..(bi + 1) * npts].iter().enumerate() {
                            let gv = gpl[pi];
                            if gv == 0.0 {
                                continue;
                            }
                            let (i00, i01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
                            let (i10, i11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
                            if let Some(gf) = gf.as_mut() {
                                gf[base + i00] += gv * (1.0 - tx.frac) * (1.0 - ty.frac);
                                gf[base + i01] += gv * tx.frac * (1.0 - ty.frac);
                                gf[base + i10] += gv * (1.0 - tx.frac) * ty.frac;
                                gf[base + i11] += gv * tx.frac * ty.frac;
                            }
                            if let Some(gg) = gg.as_mut() {
                                let dx =
                                    (1.0 - ty.frac) * (plane[i01] - plane[i00]) + ty.frac * (plane[i11] - plane[i10]);
                                let dy =
                                    (1.0 - tx.frac) * (plane[i10] - plane[i00]) + tx.frac * (plane[i11] - plane[i01]);
                                let gi = (bi * npts + pi) * 2;
                                gg[gi] += gv * dx * tx.dpix;
                                gg[gi + 1] += gv * dy * ty.dpix;
                            }
                        }
                    }
                }
                vec![gf, gg]
            }),
        )
    }
}
