use crate::error::{cfg_err, dim_err, Result};
use crate::tape::{Tape, Var};

impl Tape {
    /// Generalized-mean pooling over the two trailing axes:
    /// `(mean(max(x, eps)^p))^(1/p)`, `[B,C,H,W] -> [B,C]`. The exponent
    /// `p` (shape `[1]`) receives a gradient.
    pub fn gem_pool(&mut self, feat: Var, p: Var, eps: f64) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        if fs.len() != 4 || self.shape(p) != [1] {
            return Err(dim_err("gem_pool", &fs, self.shape(p)));
        }
        let pv = self.data(p)[0];
        if !(pv > 0.0) {
            return Err(cfg_err("gem_pool", format!("exponent p must be positive, got {pv}")));
        }
        let (b, c, n) = (fs[0], fs[1], fs[2] * fs[3]);
        // per-output (mean of x^p, mean of x^p·ln x)
        let mut stats = Vec::with_capacity(b * c);
        let mut out = Vec::with_capacity(b * c);
        for chunk in self.data(feat).chunks(n) {
            let (mut s, mut sl) = (0.0, 0.0);
            for &v in chunk {
                let x = v.max(eps);
                let xp = x.powf(pv);
                s += xp;
                sl += xp * x.ln();
            }
            let m = s / n as f64;
            stats.push((m, sl / n as f64));
            out.push(m.powf(1.0 / pv));
        }
        self.custom(
            "gem_pool",
            &[feat, p],
            vec![b, c],
            out,
            Box::new(move |args| {
                let fd = args.inputs[0].data();
                let y = args.output.data();
                let g = args.grad;
                let gf = args.needs[0].then(|| {
                    let mut gf = vec![0.0; fd.len()];
                    for (k, chunk) in fd.chunks(n).enumerate() {
                        let (m, _) = stats[k];
                        // dy/dx = m^(1/p - 1) · x^(p-1) / n
                        let coeff = g[k] * m.powf(1.0 / pv - 1.0) / n as f64;
                        for (j, &v) in chunk.iter().enumerate() {
                            if v >= eps {
                                gf[k * n + j] = coeff * v.powf(pv - 1.0);
                            }
                        }
                    }
                    gf
                });
                let gp = args.needs[1].then(|| {
                    let mut acc = 0.0;
                    for (k, &(m, ml)) in stats.iter().enumerate() {
                        // dy/dp = y · (-ln m / p² + ml / (p·m))
                        acc += g[k] * y[k] * (-m.ln() / (pv * pv) + ml / (pv * m));
                    }
                    vec![acc]
                });
                vec![gf, gp]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{DType, Tensor};
    use crate::{Tape, TensorError};

    fn gem(vals: &[f64], p: f64) -> f64 {
        let mut tape = Tape::new(DType::F64);
        let f = tape.constant(Tensor::from_vec(&[1, 1, 1, vals.len()], vals.to_vec()).unwrap());
        let p = tape.constant(Tensor::scalar(p, DType::F64));
        let y = tape.gem_pool(f, p, 1e-6).unwrap();
        tape.data(y)[0]
    }

    #[test]
    fn p_one_is_mean() {
        assert!((gem(&[1.0, 2.0, 6.0], 1.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn p_three_on_one_two() {
        assert!((gem(&[1.0, 2.0], 3.0) - 1.650_963_624_447_313).abs() < 1e-9);
    }

    #[test]
    fn large_p_approaches_max() {
        // a single dominant value among n samples gives max·n^(-1/p)
        let v = gem(&[1.0, 2.0], 100.0);
        assert!((v - 2.0).abs() / 2.0 < 0.01, "{v}");
        let v = gem(&[0.2, 0.5, 1.3, 0.9], 100.0);
        assert!((v - 1.3 * 0.25f64.powf(0.01)).abs() < 1e-3, "{v}");
    }

    #[test]
    fn negative_inputs_are_clamped() {
        let v = gem(&[-5.0, -1.0], 3.0);
        assert!((v - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn non_positive_p_is_rejected() {
        let mut tape = Tape::new(DType::F64);
        let f = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0, DType::F64));
        let p = tape.constant(Tensor::scalar(0.0, DType::F64));
        assert!(matches!(tape.gem_pool(f, p, 1e-6), Err(TensorError::Config { .. })));
    }
}
