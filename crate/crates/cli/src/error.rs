use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` needs {} (run `{producer}` first)", path.display())]
    StageDependency {
        stage: &'static str,
        producer: &'static str,
        path: PathBuf,
    },

    #[error(
        "{} was produced under config hash {found}, the current config hashes to {expected}; rerun `{producer}`",
        path.display()
    )]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
        producer: &'static str,
    },

    #[error("run directory {} is locked by `{holder}`; delete the lock file if that process is gone", path.display())]
    Locked { path: PathBuf, holder: String },

    #[error("{} of {} folds failed: {}", failures.len(), total, failures.join("; "))]
    FoldsFailed { failures: Vec<String>, total: usize },

    #[error(transparent)]
    Core(#[from] signfold_core::Error),

    #[error(transparent)]
    Nn(#[from] signfold_nn::Error),
}

impl PipelineError {
    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |e| signfold_core::error::io_err(path)(e).into()
    }
}
