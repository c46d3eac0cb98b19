//! Counterfactual segmentation dataset synthesis and open-vocabulary
//! segmentation training machinery.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: vocabulary, RLE class masks, sample records and the JSONL manifest.
//! - [`prompt`]: instruction building and counterfactual text substitution.
//! - [`backends`]: text/image/detector/segmenter clients plus the procedural mock.
//! - [`pipeline`]: prompt → text → image pair → detect → segment → record.
//! - [`sampler`]: per-image category subsets with random negatives.
//! - [`losses`]: focal, dice and counterfactual cosine losses with analytic gradients.
//! - [`trainer`]: a small linear segmenter, Adam, training loop and gradient checks.
//! - [`metrics`]: background-thresholded label assignment, mIoU and point-sampled mIoU.
//!
//! Data-parallel loops go through [`par`], which falls back to sequential
//! execution when the `parallel` feature is disabled.

pub mod ablation;
pub mod backends;
pub mod config;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod sampler;
pub mod seed;
pub mod trainer;
pub mod types;

pub use par::Execution;
pub use types::{CategoryId, ClassMask, Manifest, SampleRecord, Vocabulary};
