//! Run configuration: a preset supplies defaults and a JSON file overrides
//! any subset of them. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vpr_core::retrieval::{ground_truths, GroundTruthConfig, SynthConfig, DEFAULT_NS};
use vpr_core::training::{optimizers, DistillConfig, FinetuneConfig, OptimConfig};
use vpr_core::{Error, ModelConfig, Result};
use vpr_tensor::DType;

use crate::formats::read_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Preset::Toy),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset `{other}` (expected toy or full)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Root of every random stream; stage seeds are derived from it.
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    /// Precomputed teacher tokens `[N_train, 1+P, D]` in manifest order;
    /// a frozen random teacher is used when absent.
    pub teacher_tokens: Option<PathBuf>,
    /// Checkpoint used by `extract`; defaults to the fine-tuned one.
    pub checkpoint: Option<PathBuf>,
    pub pca_dim: Option<usize>,
    pub pca_whiten: bool,
    pub eval_batch: usize,
    pub ground_truth: GroundTruthConfig,
    pub recall_ns: Vec<usize>,
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

/// Offsets that split the root seed into independent streams.
pub mod seed_offset {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const DISTILL: u64 = 3;
    pub const FINETUNE: u64 = 4;
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Full => Self::full(),
        }
    }

    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            preset: Preset::Toy,
            seed: 0,
            precision: Precision::F32,
            data: SynthConfig {
                image_size: model.backbone.image_size,
                ..SynthConfig::default()
            },
            distill: DistillConfig {
                optim: OptimConfig {
                    lr: 1e-3,
                    ..OptimConfig::default()
                },
                epochs: 4,
                batch_size: 8,
                ..DistillConfig::default()
            },
            finetune: FinetuneConfig {
                optim: OptimConfig {
                    lr: 1e-3,
                    ..OptimConfig::default()
                },
                epochs: 8,
                places_per_batch: 8,
                ..FinetuneConfig::default()
            },
            model,
            teacher_tokens: None,
            checkpoint: None,
            pca_dim: Some(16),
            pca_whiten: false,
            eval_batch: 8,
            ground_truth: GroundTruthConfig::default(),
            recall_ns: DEFAULT_NS.to_vec(),
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }

    /// Full-size model with the reference training hyper-parameters.
    pub fn full() -> Self {
        let model = ModelConfig::full();
        Self {
            preset: Preset::Full,
            data: SynthConfig {
                image_size: model.backbone.image_size,
                ..SynthConfig::default()
            },
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            model,
            pca_dim: Some(4096),
            ..Self::toy()
        }
    }

    /// Preset defaults overlaid with a JSON document. The preset is taken
    /// from `preset_override`, else from the document, else toy.
    pub fn from_json(doc: Value, preset_override: Option<Preset>) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let preset = match preset_override {
            Some(p) => p,
            None => match doc.get("preset") {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
                None => Preset::Toy,
            },
        };
        let mut base = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut base, doc);
        base["preset"] = serde_json::to_value(preset).expect("preset serializes");
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let doc: Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, "json", e.to_string()))?;
        Self::from_json(doc, preset_override).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn derived_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.derived_seed(seed_offset::DATA),
            ..self.data.clone()
        }
    }

    pub fn distill_stage(&self) -> DistillConfig {
        DistillConfig {
            seed: self.derived_seed(seed_offset::DISTILL),
            ..self.distill.clone()
        }
    }

    pub fn finetune_stage(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.derived_seed(seed_offset::FINETUNE),
            ..self.finetune.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.data.image_size != self.model.backbone.image_size {
            return bad(format!(
                "data.image_size {} differs from model.backbone.image_size {}",
                self.data.image_size, self.model.backbone.image_size
            ));
        }
        for (key, seed) in [
            ("data.seed", self.data.seed),
            ("distill.seed", self.distill.seed),
            ("finetune.seed", self.finetune.seed),
        ] {
            if seed != 0 {
                return bad(format!(
                    "{key}: stage seeds are derived from the top-level `seed`; leave it unset"
                ));
            }
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        if self.recall_ns.is_empty() || self.recall_ns.contains(&0) || !self.recall_ns.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "recall_ns {:?} must be positive and strictly increasing",
                self.recall_ns
            ));
        }
        if let Some(k) = self.pca_dim {
            let d = self.model.descriptor_dim();
            if k == 0 || k > d {
                return bad(format!("pca_dim {k} must lie in 1..={d}"));
            }
        }
        for (key, name) in [
            ("distill.optimizer", &self.distill.optimizer),
            ("finetune.optimizer", &self.finetune.optimizer),
        ] {
            if !optimizers().contains(name) {
                return bad(format!("{key}: unknown optimizer `{name}`"));
            }
        }
        if !ground_truths().contains(&self.ground_truth.mode) {
            return bad(format!("ground_truth.mode: unknown mode `{}`", self.ground_truth.mode));
        }
        self.finetune.loss.validate()?;
        Ok(())
    }
}

/// Recursive object merge; `patch` wins and non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
