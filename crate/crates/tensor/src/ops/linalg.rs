use crate::error::{dim_err, Result};
use crate::tape::{Tape, Var};

/// `out[m, n] += Σ_k a[m, k] · b[k, n]` on row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m, n] += Σ_k a[m, k] · b[n, k]`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += Σ_m a[m, k] · b[m, n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

impl Tape {
    /// `y = x·W + b` over the trailing axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(dim_err("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err("linear", &ws, self.shape(b)));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bd = self.data(b);
            out.chunks_mut(n).for_each(|r| r.copy_from_slice(bd));
        }
        gemm_acc(self.data(x), self.data(w), &mut out, m, k, n);
        let mut shape = xs.clone();
        *shape.last_mut().expect("non-empty") = n;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.custom(
            "linear",
            &parents,
            shape,
            out,
            Box::new(move |args| {
                let xd = args.inputs[0].data();
                let wd = args.inputs[1].data();
                let g = args.grad;
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![0.0; m * k];
                    gemm_nt_acc(g, wd, &mut gx, m, n, k);
                    gx
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![0.0; k * n];
                    gemm_tn_acc(xd, g, &mut gw, m, k, n);
                    gw
                });
                let mut res = vec![gx, gw];
                if args.inputs.len() == 3 {
                    res.push(args.needs[2].then(|| {
                        let mut gb = vec![0.0; n];
                        for r in g.chunks(n) {
                            gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }

    /// Batched matrix product. `a` is `[B, M, K]`; `b` is `[B, K, N]`, or
    /// `[B, N, K]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(dim_err("bmm", &as_, &bs));
        }
        let (bt, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if transpose_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(dim_err("bmm", &as_, &bs));
        }
        let mut out = vec![0.0; bt * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..bt {
                let asl = &ad[i * m * k..(i + 1) * m * k];
                let bsl = &bd[i * k * n..(i + 1) * k * n];
                let o = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    gemm_nt_acc(asl, bsl, o, m, k, n);
                } else {
                    gemm_acc(asl, bsl, o, m, k, n);
                }
            }
        }
        self.custom(
            "bmm",
            &[a, b],
            vec![bt, m, n],
            out,
            Box::new(move |args| {
                let (ad, bd) = (args.inputs[0].data(), args.inputs[1].data());
                let g = args.grad;
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bsl = &bd[i * k * n..(i + 1) * k * n];
                        let o = &mut ga[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            // dA = G·B  (B is [N,K])
                            gemm_acc(gs, bsl, o, m, n, k);
                        } else {
                            // dA = G·Bᵀ (B is [K,N])
                            gemm_nt_acc(gs, bsl, o, m, n, k);
                        }
                    }
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let asl = &ad[i * m * k..(i + 1) * m * k];
                        let o = &mut gb[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            // dB = Gᵀ·A, shape [N,K]
                            gemm_tn_acc(gs, asl, o, m, n, k);
                        } else {
                            // dB = Aᵀ·G, shape [K,N]
                            gemm_tn_acc(asl, gs, o, m, k, n);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}
