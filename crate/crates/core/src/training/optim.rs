//! Adaptive-moment optimizers behind a common trait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; ignored by plain Adam.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub trait Optimizer {
    fn name(&self) -> &'static str;

    /// Apply one update. Parameters without a gradient entry, and frozen
    /// parameters, are left untouched.
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()>;

    fn steps(&self) -> u64;
}

pub struct Adam {
    cfg: OptimConfig,
    decoupled_decay: bool,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            decoupled_decay: false,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adamw(cfg: OptimConfig) -> Self {
        Self {
            decoupled_decay: true,
            ..Self::new(cfg)
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        if self.decoupled_decay {
            "adamw"
        } else {
            "adam"
        }
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            if g.len() != p.value.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let dtype = p.value.dtype();
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mut nx = *x;
                if self.decoupled_decay {
                    nx -= c.lr * c.weight_decay * nx;
                }
                nx -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *x = dtype.round(nx);
            }
        }
        Ok(())
    }
}

pub fn optimizers() -> Registry<dyn Optimizer, OptimConfig> {
    let mut r: Registry<dyn Optimizer, OptimConfig> = Registry::new("optimizer");
    r.register("adam", |c| Ok(Box::new(Adam::new(*c)) as Box<dyn Optimizer>));
    r.register("adamw", |c| Ok(Box::new(Adam::adamw(*c)) as Box<dyn Optimizer>));
    r
}
