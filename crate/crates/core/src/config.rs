//! Experiment configuration (TOML).
//!
//! Relative paths are resolved against the directory holding the config file.
//! The config hash covers everything except the output directory, so the same
//! experiment written to two places carries the same hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::metrics::Aggregation;
use crate::preprocess::{Augmentation, ChannelPolicy, PreprocessConfig};
use crate::seed::derive_seed;
use crate::split::SplitRatios;

/// Backbone names understood by the model zoo.
pub const BACKBONES: [&str; 4] = ["mobilenet_v3_large", "resnet50", "efficientnet_b2", "tiny_cnn"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    #[serde(default, alias = "train")]
    pub hyperparams: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub root: PathBuf,
    /// Per-class cap; absent means no undersampling.
    #[serde(default)]
    pub cap: Option<usize>,
    #[serde(default)]
    pub channel_policy: ChannelPolicy,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub augmentation: Vec<Augmentation>,
}

fn default_image_size() -> usize {
    crate::preprocess::DEFAULT_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub k: usize,
    /// Overrides the seed derived from the global one.
    pub seed: Option<u64>,
    pub allow_small: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            k: 5,
            seed: None,
            allow_small: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    #[serde(default = "yes")]
    pub pretrained: bool,
    /// Layer probed for Grad-CAM; defaults to the backbone's last feature map.
    #[serde(default)]
    pub feature_layer: Option<String>,
    /// Directory holding `<backbone>.safetensors` or `<backbone>.pth`.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    ReduceOnPlateau,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(alias = "max_epochs")]
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub early_stopping: bool,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub lr_schedule: LrSchedule,
    /// Stagnant epochs before the learning rate is multiplied by `plateau_factor`.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// An epoch improves only if its loss is below `best - min_delta`.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::AdamW,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 10,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stopping: true,
            patience: 3,
            lr_schedule: LrSchedule::ReduceOnPlateau,
            plateau_patience: 2,
            plateau_factor: 0.1,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |f: &str| format!("hyperparams.{f}");
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(p("learning_rate"), "must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(p("batch_size"), "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config(p("epochs"), "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(p("weight_decay"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(p("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(p("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(p("eps"), "must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config(p("plateau_factor"), "must lie strictly between 0 and 1"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config(p("plateau_patience"), "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config(p("patience"), "must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config(p("min_delta"), "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Overrides `model.feature_layer` for explanations.
    pub layer: Option<String>,
    pub opacity: f64,
    /// Test images explained per fold.
    pub count: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            layer: None,
            opacity: 0.4,
            count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// CSV of prior results (`study,dataset,test_accuracy`).
    pub baselines: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; defaults to `runs/<dataset name>`.
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_owned();
            let path = e
                .span()
                .map(|s| key_at(text, s.start))
                .unwrap_or_else(|| "<config>".into());
            Error::config(path, msg)
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = match std::env::current_dir() {
            Ok(cwd) if base.is_relative() => cwd.join(base),
            _ => base,
        };
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.name.trim().is_empty() {
            return Err(Error::config("dataset.name", "must not be empty"));
        }
        if self.dataset.cap == Some(0) {
            return Err(Error::config("dataset.cap", "must be at least 1"));
        }
        if self.dataset.image_size == 0 {
            return Err(Error::config("dataset.image_size", "must be at least 1"));
        }
        self.preprocess()
            .validate()
            .map_err(|e| Error::config("dataset.augmentation", e.to_string()))?;
        let [tr, va, te] = self.split.ratios;
        SplitRatios { train: tr, val: va, test: te }
            .validate()
            .map_err(|e| Error::config("split.ratios", e.to_string()))?;
        if self.split.k < 2 {
            return Err(Error::config("split.k", "needs at least 2 folds"));
        }
        if !BACKBONES.contains(&self.model.backbone.as_str()) {
            return Err(Error::config(
                "model.backbone",
                format!("unknown backbone `{}`; expected one of {}", self.model.backbone, BACKBONES.join(", ")),
            ));
        }
        self.hyperparams.validate()?;
        if !(0.0..=1.0).contains(&self.explain.opacity) {
            return Err(Error::config("explain.opacity", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.resolve(&self.dataset.root)
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output.dir {
            Some(d) => self.resolve(d),
            None => self.resolve(&Path::new("runs").join(&self.dataset.name)),
        }
    }

    pub fn weights_dir(&self) -> Option<PathBuf> {
        self.model.weights_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn baselines(&self) -> Option<PathBuf> {
        self.report.baselines.as_deref().map(|p| self.resolve(p))
    }

    pub fn ratios(&self) -> SplitRatios {
        let [train, val, test] = self.split.ratios;
        SplitRatios { train, val, test }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_height: self.dataset.image_size,
            target_width: self.dataset.image_size,
            channel_policy: self.dataset.channel_policy,
            augmentation: self.dataset.augmentation.clone(),
        }
    }

    /// Seed for one pipeline stage, derived from the global seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &["stage", stage])
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or_else(|| self.stage_seed("split"))
    }

    /// Hex SHA-256 over the canonical JSON form, with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = None;
        let canonical = serde_json::to_vec(&c).expect("config serializes to JSON");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Dotted path of the TOML key whose value begins at byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_owned();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            if !trimmed.starts_with('#') {
                key = k.trim().to_owned();
            }
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
