//! The experiment pipeline behind the `signfold` command.
//!
//! A [`Pipeline`] owns one locked run directory and runs the workflow stages
//! against it. Every stage writes its artifacts tagged with the config hash
//! and refuses upstream artifacts that carry a different one.

pub mod error;
pub mod gallery;
pub mod pipeline;
pub mod rundir;
pub mod site;

pub use error::{PipelineError, Result};
pub use pipeline::{canonical_config, Overrides, Pipeline};
pub use rundir::RunDir;
