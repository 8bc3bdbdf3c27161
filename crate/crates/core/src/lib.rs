//! Place recognition with a distilled ViT student: staged backbone with
//! adapters, a recovery projection into the teacher width, deformable
//! multi-scale region aggregation, a cross-image encoder, two-stage
//! training and retrieval evaluation.

pub mod analysis;
pub mod backbone;
pub mod config;
pub mod drm;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod registry;
pub mod retrieval;
pub mod tdda;
pub mod training;

pub use config::{AggregatorConfig, BackboneConfig, EncoderConfig, ModelConfig, NUM_REGIONS, NUM_STAGES};
pub use error::{Error, ErrorKind, Result};
pub use params::{Ctx, Init, Param, ParamBuilder, ParamStore};
pub use registry::Registry;
