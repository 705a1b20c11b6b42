//! The staged workflow: prepare → balance → split → train → evaluate →
//! explain → report.
//!
//! Each stage reads the previous stage's files from the run directory and
//! refuses them when they are missing or were written under a different
//! config hash. [`Pipeline::run`] executes all stages, skipping those whose
//! completion marker already carries the current hash, and skipping folds
//! whose checkpoint does.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use signfold_core::balance::{passthrough, undersample, BalancePolicy};
use signfold_core::config::ExperimentConfig;
use signfold_core::error::read_json;
use signfold_core::ingest::build_manifest_with_summary;
use signfold_core::metrics::evaluate_model;
use signfold_core::report::{render_confusion, FoldReport, Phase};
use signfold_core::split::{annotate, assignments_from_manifest, stratified_holdout, stratified_kfold};
use signfold_core::{DatasetManifest, FoldAssignment, SampleRecord, SplitAssignment, SplitTag};
use signfold_nn::trainer::{load_checkpoint, run_cv, CheckpointDescriptor, FoldJob, LabeledImage, TrainedFold};
use signfold_nn::{Backbone, BackboneSpec};
use tracing::info;

use crate::error::{PipelineError, Result};
use crate::gallery::{gallery, CamRecord};
use crate::rundir::{RunDir, RunLock};
use crate::site::{build_site, confusion_title, SiteSummary};

pub const OUTPUT_DIR_ENV: &str = "SIGNFOLD_OUTPUT_DIR";
pub const DEVICE_ENV: &str = "SIGNFOLD_DEVICE";

/// The two settings the environment may override.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub device: Option<String>,
}

impl Overrides {
    pub fn from_env() -> Self {
        let var = |k| std::env::var(k).ok().filter(|v: &String| !v.is_empty());
        Self {
            output_dir: var(OUTPUT_DIR_ENV).map(PathBuf::from),
            device: var(DEVICE_ENV),
        }
    }
}

/// Resolves every path against the config's directory so the snapshot can be
/// reloaded from anywhere and hashes the same.
pub fn canonical_config(cfg: &ExperimentConfig, overrides: &Overrides) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.dataset.root = cfg.dataset_root();
    c.model.weights_dir = cfg.weights_dir();
    c.report.baselines = cfg.baselines();
    c.output.dir = Some(match &overrides.output_dir {
        Some(d) => d.clone(),
        None => cfg.output_dir(),
    });
    c
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    hash: String,
    run: RunDir,
    device: Device,
    _lock: RunLock,
}

pub(crate) fn expect_hash(path: &Path, found: Option<&str>, expected: &str, producer: &'static str) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        other => Err(PipelineError::HashMismatch {
            path: path.to_path_buf(),
            found: other.unwrap_or("<none>").to_owned(),
            expected: expected.to_owned(),
            producer,
        }),
    }
}

impl Pipeline {
    pub fn open(config_path: &Path, overrides: &Overrides) -> Result<Self> {
        Self::from_config(&ExperimentConfig::load(config_path)?, overrides)
    }

    pub fn from_config(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<Self> {
        let cfg = canonical_config(cfg, overrides);
        let hash = cfg.hash();
        let run = RunDir::new(cfg.output_dir());
        let device = signfold_nn::device(overrides.device.as_deref().unwrap_or("cpu"))?;
        let lock = RunLock::acquire(run.root())?;
        info!(run_dir = %run.root().display(), config_hash = %hash, "opened run directory");
        Ok(Self {
            cfg,
            hash,
            run,
            device,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    fn write_snapshot(&self) -> Result<()> {
        let path = self.run.config_snapshot();
        // the snapshot lives in the output directory, so it does not name it
        let mut snap = self.cfg.clone();
        snap.output.dir = None;
        let text = format!("# config hash {}\n{}", self.hash, snap.to_toml());
        if std::fs::read_to_string(&path).is_ok_and(|old| old != text) {
            tracing::warn!(path = %path.display(), "config changed; artifacts from the previous config will be refused");
        }
        std::fs::write(&path, text).map_err(PipelineError::io(&path))
    }

    /// Records a completed stage: the config snapshot and the stage marker.
    fn finish(&self, stage: &str, hash: &str) -> Result<()> {
        self.write_snapshot()?;
        self.run.mark_done(stage, hash)
    }

    fn load_manifest(&self, path: &Path, stage: &'static str, producer: &'static str) -> Result<DatasetManifest> {
        if !path.is_file() {
            return Err(PipelineError::StageDependency {
                stage,
                producer,
                path: path.to_path_buf(),
            });
        }
        let m = DatasetManifest::load(path)?;
        expect_hash(path, m.config_hash.as_deref(), &self.hash, producer)?;
        Ok(m)
    }

    /// Scans the dataset root into `manifests/raw.json`. With `synthetic =
    /// Some((classes, per_class))`, first writes a separable blob dataset of
    /// 64×64 images there.
    pub fn prepare(&self, synthetic: Option<(usize, usize)>) -> Result<DatasetManifest> {
        let root = self.cfg.dataset_root();
        if let Some((classes, per_class)) = synthetic {
            signfold_core::synthetic::write_dataset(&root, classes, per_class, 64, self.cfg.stage_seed("synthetic"))?;
        }
        let (mut m, summary) = build_manifest_with_summary(&root, &self.cfg.dataset.name)?;
        m.config_hash = Some(self.hash.clone());
        m.save(&self.run.raw_manifest())?;
        info!(samples = m.len(), classes = m.classes.len(), skipped = summary.undecodable.len(), "prepared manifest");
        self.finish("prepare", &self.hash)?;
        Ok(m)
    }

    /// Applies the per-class cap when one is configured; otherwise copies the manifest.
    pub fn balance(&self) -> Result<DatasetManifest> {
        let raw = self.load_manifest(&self.run.raw_manifest(), "balance", "prepare")?;
        let out = match self.cfg.dataset.cap {
            Some(cap) => undersample(&raw, &BalancePolicy::new(cap, self.cfg.stage_seed("balance"))?),
            None => passthrough(&raw),
        };
        out.save(&self.run.balanced_manifest())?;
        info!(before = raw.len(), after = out.len(), "balanced manifest");
        self.finish("balance", &self.hash)?;
        Ok(out)
    }

    /// Stratified holdout plus k-fold over train+val, written into `manifests/annotated.json`.
    pub fn split(&self) -> Result<DatasetManifest> {
        let balanced = self.run.balanced_manifest();
        let input = if self.cfg.dataset.cap.is_some() || balanced.is_file() {
            self.load_manifest(&balanced, "split", "balance")?
        } else {
            self.load_manifest(&self.run.raw_manifest(), "split", "prepare")?
        };
        let seed = self.cfg.split_seed();
        let holdout = stratified_holdout(&input, self.cfg.ratios(), seed, self.cfg.split.allow_small)?;
        let folds = stratified_kfold(&input, &holdout, self.cfg.split.k, seed)?;
        let out = annotate(&input, &holdout, Some(&folds));
        out.save(&self.run.annotated_manifest())?;
        info!(k = folds.k, test = holdout.ids(SplitTag::Test).count(), "split manifest");
        self.finish("split", &self.hash)?;
        Ok(out)
    }

    fn annotated(&self, stage: &'static str) -> Result<(DatasetManifest, SplitAssignment, FoldAssignment)> {
        let m = self.load_manifest(&self.run.annotated_manifest(), stage, "split")?;
        let seed = m.seed.unwrap_or_else(|| self.cfg.split_seed());
        let (holdout, folds) = assignments_from_manifest(&m, self.cfg.ratios(), self.cfg.split.k, seed)?;
        Ok((m, holdout, folds))
    }

    /// One-based fold numbers; empty means all.
    fn fold_list(&self, folds: &[usize]) -> Result<Vec<usize>> {
        let k = self.cfg.split.k;
        if folds.is_empty() {
            return Ok((1..=k).collect());
        }
        for &f in folds {
            if f == 0 || f > k {
                return Err(signfold_core::Error::InvalidArgument(format!("fold {f} is outside 1..={k}")).into());
            }
        }
        Ok(folds.to_vec())
    }

    fn backbone_spec(&self, num_classes: usize) -> Result<BackboneSpec> {
        let backbone: Backbone = self.cfg.model.backbone.parse()?;
        Ok(BackboneSpec {
            backbone,
            num_classes,
            pretrained: self.cfg.model.pretrained,
            feature_layer: self.cfg.model.feature_layer.clone(),
            weights_dir: self.cfg.weights_dir(),
            seed: self.cfg.seed,
        })
    }

    fn has_current_checkpoint(&self, fold: usize) -> bool {
        read_json::<CheckpointDescriptor>(&self.run.checkpoint(fold)).is_ok_and(|d| d.config_hash == self.hash)
    }

    /// Trains the given folds (one-based; empty means all). With `resume`,
    /// folds holding a checkpoint from the current config are skipped. Every
    /// fold is attempted; failures are collected and reported together.
    pub fn train(&self, folds: &[usize], resume: bool) -> Result<Vec<TrainedFold>> {
        let (m, _, assignment) = self.annotated("train")?;
        let root = m.root.clone();
        let by_id: HashMap<&str, &SampleRecord> = m.samples.iter().map(|s| (s.id(), s)).collect();
        let item = |id: &str| LabeledImage {
            id: id.to_owned(),
            path: root.join(id),
            label: by_id[id].label_index,
        };
        let spec = self.backbone_spec(m.classes.len())?;
        let preprocess = self.cfg.preprocess();
        let seed = self.cfg.stage_seed("train");
        let wanted = self.fold_list(folds)?;
        let mut jobs = Vec::new();
        for &f in &wanted {
            if resume && self.has_current_checkpoint(f) {
                info!(fold = f, "checkpoint is current; skipping");
                continue;
            }
            let (train, val) = assignment.partition(f - 1);
            jobs.push(FoldJob {
                spec: &spec,
                preprocess: &preprocess,
                hp: &self.cfg.hyperparams,
                seed,
                fold: f - 1,
                classes: &m.classes,
                train: train.into_iter().map(item).collect(),
                val: val.into_iter().map(item).collect(),
                out_dir: self.run.fold_dir(f),
                config_hash: &self.hash,
                device: &self.device,
            });
        }
        let total = jobs.len();
        let mut done = Vec::new();
        let mut failures = Vec::new();
        for r in run_cv(jobs) {
            match r {
                Ok(t) => {
                    info!(fold = t.fold + 1, best_epoch = t.best_epoch, epochs = t.logs.len(), "fold trained");
                    done.push(t);
                }
                Err(e) => {
                    tracing::error!(error = %e, "fold failed");
                    failures.push(e.to_string());
                }
            }
        }
        if !failures.is_empty() {
            return Err(PipelineError::FoldsFailed { failures, total });
        }
        if wanted.len() == self.cfg.split.k {
            self.finish("train", &self.hash)?;
        }
        Ok(done)
    }

    fn load_fold(&self, stage: &'static str, fold: usize) -> Result<(signfold_nn::Model, signfold_core::Preprocessor, CheckpointDescriptor)> {
        let path = self.run.checkpoint(fold);
        if !path.is_file() {
            return Err(PipelineError::StageDependency {
                stage,
                producer: "train",
                path,
            });
        }
        let loaded = load_checkpoint(&path, &self.device)?;
        expect_hash(&path, Some(&loaded.2.config_hash), &self.hash, "train")?;
        Ok(loaded)
    }

    /// Scores each fold's checkpoint on its validation part and/or the shared
    /// test set, writing one FoldReport per (fold, phase) and a confusion
    /// matrix rendering for each.
    pub fn evaluate(&self, folds: &[usize], phases: &[Phase]) -> Result<Vec<FoldReport>> {
        let (m, holdout, assignment) = self.annotated("evaluate")?;
        let by_id: HashMap<&str, &SampleRecord> = m.samples.iter().map(|s| (s.id(), s)).collect();
        let test: Vec<&SampleRecord> = holdout.ids(SplitTag::Test).map(|id| by_id[id]).collect();
        let wanted = self.fold_list(folds)?;
        let mut reports = Vec::new();
        for &f in &wanted {
            let (model, prep, desc) = self.load_fold("evaluate", f)?;
            for &phase in phases {
                let samples: Vec<&SampleRecord> = match phase {
                    Phase::Test => test.clone(),
                    Phase::Validation => assignment.partition(f - 1).1.into_iter().map(|id| by_id[id]).collect(),
                };
                let (cm, bundle) = evaluate_model(
                    &model,
                    &samples,
                    &m.root,
                    &prep,
                    &m.classes,
                    self.cfg.metrics.aggregation,
                    self.cfg.hyperparams.batch_size,
                )?;
                let report = FoldReport::from_bundle(
                    desc.backbone.name(),
                    &self.cfg.dataset.name,
                    f - 1,
                    phase,
                    &bundle,
                    self.cfg.seed,
                    &self.hash,
                );
                report.save(&self.run.report(f, phase))?;
                let title = confusion_title(desc.backbone.name(), &self.cfg.dataset.name, phase, f);
                render_confusion(&cm.with_config_hash(&self.hash), &title, &self.run.confusion_dir(), &format!("fold_{f}_{phase}"))?;
                info!(fold = f, %phase, accuracy = report.accuracy, "evaluated");
                reports.push(report);
            }
        }
        if wanted.len() == self.cfg.split.k && phases.len() == 2 {
            self.finish("evaluate", &self.hash)?;
        }
        Ok(reports)
    }

    /// Grad-CAM overlays for `explain.count` test images per fold, spread across classes.
    pub fn explain(&self, folds: &[usize]) -> Result<Vec<CamRecord>> {
        let (m, holdout, _) = self.annotated("explain")?;
        let mut test: Vec<&SampleRecord> = m.samples.iter().filter(|s| holdout.tag(s.id()) == Some(SplitTag::Test)).collect();
        test.sort_by(|a, b| a.id().cmp(b.id()));
        // round-robin over classes so the gallery is not all one class
        let mut per_class: Vec<Vec<&SampleRecord>> = vec![Vec::new(); m.classes.len()];
        for s in test {
            per_class[s.label_index].push(s);
        }
        let mut chosen = Vec::new();
        let deepest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        'outer: for depth in 0..deepest {
            for class in &per_class {
                if chosen.len() == self.cfg.explain.count {
                    break 'outer;
                }
                if let Some(s) = class.get(depth) {
                    chosen.push(*s);
                }
            }
        }
        let wanted = self.fold_list(folds)?;
        let mut records = Vec::new();
        for &f in &wanted {
            let (model, prep, desc) = self.load_fold("explain", f)?;
            let layer = self.cfg.explain.layer.clone().unwrap_or_else(|| desc.feature_layer.clone());
            records.extend(gallery(
                &model,
                &prep,
                &desc,
                &Path::new("folds").join(format!("fold_{f}")).join(signfold_nn::trainer::CHECKPOINT_FILE),
                &chosen,
                &m.root,
                &layer,
                self.cfg.explain.opacity,
                &self.run.gradcam_dir(f),
            )?);
        }
        if wanted.len() == self.cfg.split.k {
            self.finish("explain", &self.hash)?;
        }
        Ok(records)
    }

    /// Renders tables and figures into `<run>/site`.
    pub fn report(&self) -> Result<SiteSummary> {
        let out = self.run.site();
        let summary = build_site(self.run.root(), &out, self.cfg.baselines().as_deref())?;
        self.finish("report", &self.hash)?;
        Ok(summary)
    }

    /// All stages in order, resuming past completed ones.
    pub fn run(&self, synthetic: Option<(usize, usize)>) -> Result<SiteSummary> {
        let skip = |stage: &str| {
            let done = self.run.is_done(stage, &self.hash);
            if done {
                info!(stage, "up to date; skipping");
            }
            done
        };
        if synthetic.is_some() || !skip("prepare") {
            self.prepare(synthetic)?;
        }
        if !skip("balance") {
            self.balance()?;
        }
        if !skip("split") {
            self.split()?;
        }
        if !skip("train") {
            self.train(&[], true)?;
        }
        if !skip("evaluate") {
            self.evaluate(&[], &[Phase::Validation, Phase::Test])?;
        }
        if !skip("explain") {
            self.explain(&[])?;
        }
        self.report()
    }
}
