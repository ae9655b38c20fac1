//! Reference-free, informative image caption evaluation.
//!
//! Given an image (with detected regions) and a caption, the model reports a
//! text precision score, a vision recall score and their sum, together with
//! token-level scores that flag incorrect caption words and unmentioned
//! image regions.
//!
//! Modules follow the pipeline: [`encoding`] produces token features from a
//! frozen backbone, [`fusion`] models intra- and inter-modal context,
//! [`scoring`] derives token-level and global scores, [`training`] optimizes
//! the multi-task objective on data built by [`datagen`], and [`evalharness`]
//! computes benchmark statistics.

pub mod autodiff;
pub mod datagen;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod evalharness;
pub mod fusion;
pub mod model;
pub mod scoring;
pub mod synth;
pub mod training;

pub use encoding::{
    CaptionTokenFeatures, EmbeddingBackbone, ImageTokenFeatures, PosSet, RegionSet,
    SyntheticBackbone, TaggedCaption,
};
pub use error::{Error, Result};
pub use fusion::{FusedFeatures, FusionConfig};
pub use model::{Model, ModelConfig};
pub use scoring::{ScoreOptions, ScoreReport, TokenScores};
