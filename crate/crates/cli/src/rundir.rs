//! Run directory layout and the writer lock.
//!
//! ```text
//! <run>/
//!   config.toml                     config snapshot (paths made absolute)
//!   stages/<stage>.json             completion markers
//!   manifests/{raw,balanced,annotated}.json
//!   folds/fold_<n>/                 checkpoint.json, weights, stats, epochs.jsonl, audit.json
//!   reports/fold_<n>_<phase>.json
//!   figures/confusion/fold_<n>_<phase>.{png,svg,json}
//!   figures/gradcam/fold_<n>/<image>.{overlay.png,heatmap.png,json}
//!   site/                           rendered tables and copied figures
//! ```
//!
//! Folds are numbered from 1 on disk and on the command line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signfold_core::error::{read_json, write_json};
use signfold_core::report::Phase;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn marker(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn raw_manifest(&self) -> PathBuf {
        self.root.join("manifests/raw.json")
    }

    pub fn balanced_manifest(&self) -> PathBuf {
        self.root.join("manifests/balanced.json")
    }

    pub fn annotated_manifest(&self) -> PathBuf {
        self.root.join("manifests/annotated.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join("folds").join(format!("fold_{fold}"))
    }

    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join(signfold_nn::trainer::CHECKPOINT_FILE)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, fold: usize, phase: Phase) -> PathBuf {
        self.reports_dir().join(format!("fold_{fold}_{phase}.json"))
    }

    pub fn confusion_dir(&self) -> PathBuf {
        self.root.join("figures/confusion")
    }

    pub fn gradcam_dir(&self, fold: usize) -> PathBuf {
        self.root.join("figures/gradcam").join(format!("fold_{fold}"))
    }

    pub fn site(&self) -> PathBuf {
        self.root.join("site")
    }
}

/// Exclusive writer lock, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&path).unwrap_or_default().trim().to_owned();
                Err(PipelineError::Locked { path, holder })
            }
            Err(e) => Err(PipelineError::io(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub config_hash: String,
}

impl RunDir {
    pub fn mark_done(&self, stage: &str, config_hash: &str) -> Result<()> {
        Ok(write_json(
            &self.marker(stage),
            &StageMarker {
                stage: stage.to_owned(),
                config_hash: config_hash.to_owned(),
            },
        )?)
    }

    pub fn is_done(&self, stage: &str, config_hash: &str) -> bool {
        read_json::<StageMarker>(&self.marker(stage)).is_ok_and(|m| m.config_hash == config_hash)
    }
}
