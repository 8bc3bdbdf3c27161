//! Principal-component reduction of descriptors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Variance floor used when whitening.
pub const WHITEN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `out_dim × in_dim`, orthonormal rows.
    pub components: Vec<f64>,
    /// Non-increasing.
    pub variances: Vec<f64>,
    pub whiten: bool,
}

impl PcaModel {
    /// Fit on `n` row-major samples of width `d`. Uses the `d × d`
    /// covariance when `d ≤ n` and the `n × n` Gram matrix otherwise.
    pub fn fit(data: &[f64], n: usize, d: usize, out_dim: usize, whiten: bool) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Dimension(format!("{} values for {n} × {d} samples", data.len())));
        }
        if n < 2 || out_dim == 0 || out_dim > (n - 1).min(d) {
            return Err(config(format!(
                "cannot extract {out_dim} components from {n} samples of width {d}"
            )));
        }
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let xc = DMatrix::from_fn(n, d, |i, j| data[i * d + j] - mean[j]);
        let denom = (n - 1) as f64;
        let (vals, vecs) = if d <= n {
            let eig = SymmetricEigen::new(xc.transpose() * &xc / denom);
            (eig.eigenvalues, eig.eigenvectors)
        } else {
            let eig = SymmetricEigen::new(&xc * xc.transpose() / denom);
            let mut v = xc.transpose() * &eig.eigenvectors;
            for (k, mut col) in v.column_iter_mut().enumerate() {
                let norm = col.norm();
                if norm > 0.0 && eig.eigenvalues[k] > 0.0 {
                    col /= norm;
                }
            }
            (eig.eigenvalues, v)
        };
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(out_dim * d);
        let mut variances = Vec::with_capacity(out_dim);
        for &k in &order[..out_dim] {
            let col = vecs.column(k);
            // deterministic sign: largest-magnitude entry positive
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.extend(col.iter().map(|v| v * sign));
            variances.push(vals[k].max(0.0));
        }
        Ok(Self {
            in_dim: d,
            out_dim,
            mean,
            components,
            variances,
            whiten,
        })
    }

    /// Project, optionally whiten, then L2-normalize. A zero projection
    /// stays zero.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Dimension(format!(
                "descriptor has {} dims, PCA expects {}",
                x.len(),
                self.in_dim
            )));
        }
        let mut y: Vec<f64> = self
            .components
            .chunks(self.in_dim)
            .map(|row| row.iter().zip(x).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect();
        if self.whiten {
            y.iter_mut()
                .zip(&self.variances)
                .for_each(|(v, var)| *v /= (var + WHITEN_EPS).sqrt());
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            y.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(y)
    }

    pub fn apply_rows(&self, data: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len() / self.in_dim.max(1) * self.out_dim);
        for row in data.chunks(self.in_dim) {
            out.extend(self.apply(row)?);
        }
        Ok(out)
    }
}
