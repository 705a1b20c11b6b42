//! Data-side building blocks for folder-per-class image classification
//! experiments: dataset manifests, class balancing, stratified holdout and
//! k-fold assignment, image preprocessing, classification metrics, Grad-CAM
//! arithmetic and result reporting.
//!
//! Everything in this crate is runtime-agnostic. The CNN side (backbones,
//! training, gradient probing) lives in `signfold-nn`.

pub mod balance;
pub mod colormap;
pub mod config;
pub mod error;
#[doc(hidden)]
pub mod fixtures;
pub mod gradcam;
pub mod ingest;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod split;
pub mod synthetic;

pub use error::{Error, Result};
pub use ingest::{ClassDistribution, DatasetManifest, SampleRecord};
pub use preprocess::{ImageTensor, NormalizationStats, PreprocessConfig, Preprocessor};
pub use split::{FoldAssignment, SplitAssignment, SplitTag};
