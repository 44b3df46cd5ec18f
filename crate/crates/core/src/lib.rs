//! Self-supervised crack segmentation: a multi-scale embedder, directional
//! attention per scale, attention-guided fusion and a linear decoder,
//! trained without masks from pseudo-labels and cross-scale consistency.
//!
//! Everything runs on a small define-by-run autodiff core in [`nnops`].

pub mod agf;
pub mod config;
pub mod dat;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nnops;
pub mod sae;
pub mod synthgen;
pub mod trainer;

pub use config::{RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{Checkpoint, CrackSegmenter, ModelConfig, PredictionBatch, Variant};
