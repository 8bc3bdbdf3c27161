//! Descriptor reduction, search and Recall@N evaluation, plus a synthetic
//! geo-tagged dataset for desk-scale runs.

mod index;
mod pca;
mod records;
mod synth;

pub use index::{evaluate, recall_at_n, DescriptorIndex, Hit, RecallReport};
pub use pca::{PcaModel, WHITEN_EPS};
pub use records::{
    ground_truths, heading_diff, FrameMatch, GeoMatch, GroundTruth, GroundTruthConfig, PlaceRecord, Split, UniqueMatch,
};
pub use synth::{synth_dataset_gen, SynthConfig, SynthDataset};

/// Recall cut-offs reported by default.
pub const DEFAULT_NS: [usize; 3] = [1, 5, 10];
