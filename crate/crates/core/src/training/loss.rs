//! Distillation and multi-similarity losses.

use serde::{Deserialize, Serialize};
use vpr_tensor::{Tape, Var};

use crate::error::{config, Error, Result};

/// Mean squared difference; the target is expected to be a constant.
pub fn mse_distill_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let (a, b) = (tape.shape(student).to_vec(), tape.shape(teacher).to_vec());
    if a != b {
        return Err(Error::Dimension(format!("student {a:?} vs teacher {b:?}")));
    }
    Ok(tape.mse(student, teacher)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Mining margin.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.5,
            margin: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(config("loss weights alpha and beta must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(config(format!("loss margin lambda {} must lie in (0, 1)", self.lambda)));
        }
        Ok(())
    }
}

/// Mined positive and negative indices per anchor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MinedSets {
    pub pos: Vec<Vec<usize>>,
    pub neg: Vec<Vec<usize>>,
}

impl MinedSets {
    pub fn is_empty(&self) -> bool {
        self.pos.iter().all(Vec::is_empty) && self.neg.iter().all(Vec::is_empty)
    }
}

/// Hard-pair mining on a row-major `n × n` similarity matrix: keep
/// positives less similar than the hardest negative plus `margin`, and
/// negatives more similar than the hardest positive minus `margin`.
/// Anchors lacking either positives or negatives get empty sets.
pub fn ms_mine(sim: &[f64], labels: &[u64], margin: f64) -> MinedSets {
    let n = labels.len();
    let mut sets = MinedSets {
        pos: vec![Vec::new(); n],
        neg: vec![Vec::new(); n],
    };
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let max_neg = neg.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let min_pos = pos.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
        sets.pos[i] = pos.into_iter().filter(|&j| row[j] < max_neg + margin).collect();
        sets.neg[i] = neg.into_iter().filter(|&k| row[k] > min_pos - margin).collect();
    }
    sets
}

fn gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

/// Multi-similarity loss on `[N, d]` unit-norm descriptors, averaged over
/// anchors. Mining happens on the forward similarities and is treated as
/// constant for the gradient.
pub fn ms_loss(tape: &mut Tape, x: Var, labels: &[u64], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "{} labels for descriptors {s:?}",
            labels.len()
        )));
    }
    let (n, d) = (s[0], s[1]);
    let sim = gram(tape.data(x), n, d);
    let mined = ms_mine(&sim, labels, cfg.margin);
    let (a, b, l) = (cfg.alpha, cfg.beta, cfg.lambda);
    // dL/dS, accumulated alongside the loss
    let mut g = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let ep: Vec<f64> = mined.pos[i].iter().map(|&j| (-a * (row[j] - l)).exp()).collect();
        let en: Vec<f64> = mined.neg[i].iter().map(|&k| (b * (row[k] - l)).exp()).collect();
        let sp = 1.0 + ep.iter().sum::<f64>();
        let sn = 1.0 + en.iter().sum::<f64>();
        total += sp.ln() / a + sn.ln() / b;
        for (&j, e) in mined.pos[i].iter().zip(&ep) {
            g[i * n + j] -= e / sp / n as f64;
        }
        for (&k, e) in mined.neg[i].iter().zip(&en) {
            g[i * n + k] += e / sn / n as f64;
        }
    }
    tape.custom(
        "ms_loss",
        &[x],
        vec![1],
        vec![total / n as f64],
        Box::new(move |args| {
            let xv = args.inputs[0].data();
            let up = args.grad[0];
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    let w = (g[i * n + j] + g[j * n + i]) * up;
                    if w != 0.0 {
                        let (dst, src) = (&mut gx[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
    .map_err(Error::from)
}
