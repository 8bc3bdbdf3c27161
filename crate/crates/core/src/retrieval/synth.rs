//! Procedural geo-tagged image sets for desk-scale experiments.

use serde::{Deserialize, Serialize};
use vpr_tensor::{DType, SeededRng, Tensor};

use super::records::{PlaceRecord, Split};
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_places: usize,
    pub train_per_place: usize,
    pub db_per_place: usize,
    pub query_per_place: usize,
    pub image_size: usize,
    /// Largest viewpoint shift, pixels.
    pub shift_px: f64,
    /// Largest relative brightness change.
    pub brightness: f64,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    pub place_spacing_m: f64,
    /// Largest distance of an image from its place centre.
    pub position_jitter_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_places: 32,
            train_per_place: 4,
            db_per_place: 1,
            query_per_place: 1,
            image_size: 28,
            shift_px: 2.0,
            brightness: 0.2,
            noise: 0.3,
            place_spacing_m: 100.0,
            position_jitter_m: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn images_per_place(&self) -> usize {
        self.train_per_place + self.db_per_place + self.query_per_place
    }
}

pub struct SynthDataset {
    /// `[N, 3, S, S]`, single precision
    pub images: Tensor,
    pub records: Vec<PlaceRecord>,
}

impl SynthDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }
}

const WAVES: usize = 4;

/// Smooth random texture: a few plane waves per channel.
struct Pattern {
    /// per channel: (fx, fy, phase, amplitude)
    waves: Vec<[(f64, f64, f64, f64); WAVES]>,
}

impl Pattern {
    fn new(rng: &mut SeededRng) -> Self {
        let waves = (0..3)
            .map(|_| {
                std::array::from_fn(|_| {
                    let f = rng.uniform(0.5, 3.0) * std::f64::consts::TAU;
                    let th = rng.uniform(0.0, std::f64::consts::TAU);
                    (
                        f * th.cos(),
                        f * th.sin(),
                        rng.uniform(0.0, std::f64::consts::TAU),
                        rng.uniform(0.3, 1.0),
                    )
                })
            })
            .collect();
        Self { waves }
    }

    fn at(&self, ch: usize, u: f64, v: f64) -> f64 {
        self.waves[ch]
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * u + fy * v + ph).sin())
            .sum()
    }
}

/// Places on a square grid `place_spacing_m` apart; images jittered around
/// them and rendered from the place's pattern with a random shift,
/// brightness change and pixel noise. Ids run in generation order.
pub fn synth_dataset_gen(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_places == 0 || cfg.db_per_place == 0 || cfg.query_per_place == 0 {
        return Err(config("synthetic set needs places with database and query images"));
    }
    if cfg.position_jitter_m * 2.0 >= cfg.place_spacing_m {
        return Err(config("position jitter must stay below half the place spacing"));
    }
    let s = cfg.image_size;
    let per = cfg.images_per_place();
    let cols = (cfg.num_places as f64).sqrt().ceil() as usize;
    let mut rng = SeededRng::new(cfg.seed);
    let mut data = Vec::with_capacity(cfg.num_places * per * 3 * s * s);
    let mut records = Vec::with_capacity(cfg.num_places * per);
    for p in 0..cfg.num_places {
        let mut prng = rng.fork(p as u64);
        let pattern = Pattern::new(&mut prng);
        let (ce, cn) = (
            (p % cols) as f64 * cfg.place_spacing_m,
            (p / cols) as f64 * cfg.place_spacing_m,
        );
        let base_heading = prng.uniform(0.0, 360.0);
        for j in 0..per {
            let split = if j < cfg.train_per_place {
                Split::Train
            } else if j < cfg.train_per_place + cfg.db_per_place {
                Split::Database
            } else {
                Split::Query
            };
            let (dx, dy) = (
                prng.uniform(-cfg.shift_px, cfg.shift_px),
                prng.uniform(-cfg.shift_px, cfg.shift_px),
            );
            let gain = 1.0 + prng.uniform(-cfg.brightness, cfg.brightness);
            let bias = prng.uniform(-cfg.brightness, cfg.brightness);
            for ch in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let u = (x as f64 + dx) / s as f64;
                        let v = (y as f64 + dy) / s as f64;
                        let n = if cfg.noise > 0.0 {
                            cfg.noise * prng.normal()
                        } else {
                            0.0
                        };
                        data.push(gain * pattern.at(ch, u, v) + bias + n);
                    }
                }
            }
            let r = cfg.position_jitter_m * prng.uniform(0.0, 1.0).sqrt();
            let a = prng.uniform(0.0, std::f64::consts::TAU);
            let id = records.len() as u64;
            records.push(PlaceRecord {
                id,
                tensor: format!("images/{id:06}.dtns"),
                easting: ce + r * a.cos(),
                northing: cn + r * a.sin(),
                heading: Some((base_heading + prng.uniform(-10.0, 10.0)).rem_euclid(360.0)),
                frame_index: Some((p * 100 + j) as i64),
                place_id: p as u64,
                split,
            });
        }
    }
    let n = records.len();
    let images = Tensor::new(&[n, 3, s, s], data, DType::F64)?.to_dtype(DType::F32);
    Ok(SynthDataset { images, records })
}
