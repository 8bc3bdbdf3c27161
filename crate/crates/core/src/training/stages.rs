//! Distillation and fine-tuning drivers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vpr_tensor::{SeededRng, Tensor};

use super::loss::{ms_loss, mse_distill_loss, LossConfig};
use super::optim::{optimizers, OptimConfig};
use super::select_rows;
use super::teacher::TeacherOracle;
use crate::error::{config, Error, Result};
use crate::model::StudentModel;
use crate::params::{Ctx, ParamStore};

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub optimizer: String,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Also match the teacher's fixed-grid descriptor.
    pub descriptor_loss: bool,
    pub descriptor_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            optimizer: "adam".into(),
            optim: OptimConfig {
                lr: 2.5e-5,
                ..OptimConfig::default()
            },
            epochs: 1,
            batch_size: 8,
            seed: 0,
            descriptor_loss: false,
            descriptor_weight: 1.0,
        }
    }
}

fn check_numeric(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss is {loss} at step {step}")))
    }
}

/// Match the teacher's last-stage tokens with the student's recovered
/// tokens. Every student parameter is trainable during this stage.
pub fn distill_stage(
    student: &StudentModel,
    store: &mut ParamStore,
    teacher: &TeacherOracle,
    images: &Tensor,
    cfg: &DistillConfig,
) -> Result<LossCurve> {
    if cfg.batch_size == 0 {
        return Err(config("batch size must be positive"));
    }
    let n = images.shape()[0];
    store.set_trainable(|_| true, true);
    let mut opt = optimizers().create(&cfg.optimizer, &cfg.optim)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let target = teacher.targets(images, idx, cfg.descriptor_loss)?;
            let grads = {
                let mut ctx = Ctx::new(store, images.dtype(), true);
                let x = ctx.input(select_rows(images, idx)?);
                let t = ctx.input(target.tokens);
                let loss = if cfg.descriptor_loss {
                    let out = student.forward(&mut ctx, x)?;
                    let td = ctx.input(target.descriptor.expect("requested descriptor target"));
                    let tok = mse_distill_loss(&mut ctx.tape, out.aligned.tokens, t)?;
                    let desc = mse_distill_loss(&mut ctx.tape, out.descriptor, td)?;
                    let desc = ctx.tape.scale(desc, cfg.descriptor_weight)?;
                    ctx.tape.add(tok, desc)?
                } else {
                    let (_, aligned) = student.align(&mut ctx, x)?;
                    mse_distill_loss(&mut ctx.tape, aligned.tokens, t)?
                };
                let value = ctx.tape.data(loss)[0];
                check_numeric(value, curve.losses.len())?;
                curve.losses.push(value);
                ctx.param_grads(loss)?
            };
            opt.step(store, &grads)?;
        }
        log::info!("distill epoch {epoch}: loss {:.6}", curve.last().unwrap_or(f64::NAN));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub optimizer: String,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub places_per_batch: usize,
    pub images_per_place: usize,
    /// Leading share of backbone blocks kept fixed (adapters excepted).
    pub freeze_fraction: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: "adamw".into(),
            optim: OptimConfig {
                lr: 2e-4,
                ..OptimConfig::default()
            },
            epochs: 1,
            places_per_batch: 32,
            images_per_place: 4,
            freeze_fraction: 0.75,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

/// Place-grouped batches for one epoch: `places_per_batch` places, each
/// contributing `images_per_place` images (drawn with replacement when a
/// place has fewer).
pub fn place_batches(
    labels: &[u64],
    places_per_batch: usize,
    images_per_place: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut places: Vec<Vec<usize>> = groups.into_values().collect();
    rng.shuffle(&mut places);
    let mut batches = Vec::new();
    for chunk in places.chunks(places_per_batch.max(1)) {
        if chunk.len() < 2 {
            log::warn!("dropping a batch with a single place: no negatives to contrast");
            continue;
        }
        let mut batch = Vec::with_capacity(chunk.len() * images_per_place);
        for members in chunk {
            let mut m = members.clone();
            rng.shuffle(&mut m);
            if m.len() >= images_per_place {
                batch.extend_from_slice(&m[..images_per_place]);
            } else {
                log::warn!("place with {} images sampled with replacement", m.len());
                batch.extend((0..images_per_place).map(|_| m[rng.below(m.len())]));
            }
        }
        batches.push(batch);
    }
    batches
}

/// Multi-similarity loss of the current model over one batch, no updates.
pub fn evaluate_ms_loss(
    student: &StudentModel,
    store: &ParamStore,
    images: &Tensor,
    labels: &[u64],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut ctx = Ctx::new(store, images.dtype(), false);
    let x = ctx.input(images.clone());
    let out = student.forward(&mut ctx, x)?;
    let loss = ms_loss(&mut ctx.tape, out.descriptor, labels, cfg)?;
    Ok(ctx.tape.data(loss)[0])
}

/// Metric fine-tuning with a frozen backbone prefix.
pub fn finetune_stage(
    student: &StudentModel,
    store: &mut ParamStore,
    images: &Tensor,
    labels: &[u64],
    cfg: &FinetuneConfig,
) -> Result<LossCurve> {
    if labels.len() != images.shape()[0] {
        return Err(Error::Data(format!(
            "{} labels for {} images",
            labels.len(),
            images.shape()[0]
        )));
    }
    if cfg.images_per_place < 2 {
        return Err(config("each place needs at least two images per batch"));
    }
    cfg.loss.validate()?;
    store.set_trainable(|_| true, true);
    student.backbone.freeze_prefix(store, cfg.freeze_fraction)?;
    let mut opt = optimizers().create(&cfg.optimizer, &cfg.optim)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        for idx in place_batches(labels, cfg.places_per_batch, cfg.images_per_place, &mut rng) {
            let batch_labels: Vec<u64> = idx.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut ctx = Ctx::new(store, images.dtype(), true);
                let x = ctx.input(select_rows(images, &idx)?);
                let out = student.forward(&mut ctx, x)?;
                let loss = ms_loss(&mut ctx.tape, out.descriptor, &batch_labels, &cfg.loss)?;
                let value = ctx.tape.data(loss)[0];
                check_numeric(value, curve.losses.len())?;
                curve.losses.push(value);
                ctx.param_grads(loss)?
            };
            opt.step(store, &grads)?;
        }
        log::info!("finetune epoch {epoch}: loss {:.6}", curve.last().unwrap_or(f64::NAN));
    }
    Ok(curve)
}
