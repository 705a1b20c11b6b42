//! Per-fold training with plateau learning-rate decay, early stopping and
//! best-epoch restoration, plus the k-fold driver.
//!
//! The epoch bookkeeping (scheduler, early stopping, checkpoint choice) lives
//! in [`Monitor`], which only sees validation losses. That keeps it testable
//! on injected loss sequences without a network.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use signfold_core::config::{LrSchedule, TrainConfig};
use signfold_core::error::{read_json, write_json};
use signfold_core::preprocess::{NormalizationStats, PreprocessConfig, Preprocessor};
use signfold_core::seed::{derive_seed, rng_for};
use signfold_core::ImageTensor;

use crate::layers::{to_f64_vec, Ctx};
use crate::model::Model;
use crate::zoo::{build_model, BackboneSpec};
use crate::{Error, Result};

pub type HyperParams = TrainConfig;

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement, then starts counting again.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// This epoch has the lowest validation loss so far (strictly).
    pub new_best: bool,
    pub next_lr: f64,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone)]
pub struct Monitor {
    max_epochs: usize,
    lr: f64,
    scheduler: Option<PlateauScheduler>,
    stopper: Option<EarlyStopping>,
    epochs_seen: usize,
    best_loss: f64,
    best_epoch: usize,
}

impl Monitor {
    pub fn new(hp: &HyperParams) -> Self {
        Self {
            max_epochs: hp.epochs,
            lr: hp.learning_rate,
            scheduler: (hp.lr_schedule == LrSchedule::ReduceOnPlateau).then(|| {
                PlateauScheduler::new(hp.learning_rate, hp.plateau_factor, hp.plateau_patience, hp.min_delta)
            }),
            stopper: hp.early_stopping.then(|| EarlyStopping::new(hp.patience, hp.min_delta)),
            epochs_seen: 0,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Learning rate for the upcoming epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One-based epoch holding the lowest validation loss so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, val_loss: f64) -> Observation {
        self.epochs_seen += 1;
        let new_best = val_loss < self.best_loss;
        if new_best {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs_seen;
        }
        if let Some(s) = &mut self.scheduler {
            self.lr = s.step(val_loss);
        }
        let early = self.stopper.as_mut().is_some_and(|s| s.step(val_loss));
        let stop = if early {
            Some(StopReason::EarlyStop)
        } else if self.epochs_seen >= self.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        Observation {
            new_best,
            next_lr: self.lr,
            stop,
        }
    }
}

/// What the trainer would do given these validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Learning rate in effect during each epoch that ran.
    pub lrs: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub reason: StopReason,
}

/// Replays `losses` through a [`Monitor`]. Losses beyond the stopping point
/// are ignored; if the sequence runs out first, the run counts as finished.
pub fn simulate(hp: &HyperParams, losses: &[f64]) -> Trace {
    let mut m = Monitor::new(hp);
    let mut lrs = Vec::new();
    for &l in losses {
        lrs.push(m.lr());
        if let Some(reason) = m.observe(l).stop {
            return Trace {
                epochs_run: lrs.len(),
                lrs,
                best_epoch: m.best_epoch(),
                reason,
            };
        }
    }
    Trace {
        epochs_run: lrs.len(),
        lrs,
        best_epoch: m.best_epoch(),
        reason: StopReason::MaxEpochs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

/// A sample as the trainer sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Unit-scaled images are cached in memory below this size.
const CACHE_BYTES: usize = 1 << 30;

/// Loads, resizes and standardizes images, optionally holding the
/// unit-scaled versions in memory.
struct Loader<'a> {
    prep: &'a Preprocessor,
    items: &'a [LabeledImage],
    cache: Option<Vec<ImageTensor>>,
}

impl<'a> Loader<'a> {
    fn new(prep: &'a Preprocessor, items: &'a [LabeledImage]) -> Result<Self> {
        let cfg = prep.config();
        let bytes = items.len() * cfg.target_height * cfg.target_width * 3 * std::mem::size_of::<f64>();
        let cache = if bytes <= CACHE_BYTES {
            Some(items.par_iter().map(|it| self_unit(prep, it)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { prep, items, cache })
    }

    fn unit(&self, i: usize) -> Result<ImageTensor> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => self_unit(self.prep, &self.items[i]),
        }
    }

    fn batch(&self, model: &Model, idx: &[usize], augment_seed: Option<u64>) -> Result<(Tensor, Tensor)> {
        let images = idx
            .par_iter()
            .map(|&i| {
                let unit = self.unit(i)?;
                let unit = match augment_seed {
                    Some(s) => {
                        let mut rng = rng_for(s, &[&i.to_string()]);
                        self.prep.config().augmentation.iter().fold(unit, |img, a| a.apply(img, &mut rng))
                    }
                    None => unit,
                };
                Ok(self.prep.standardized(&unit)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = model.batch_tensor(&images)?;
        let labels: Vec<u32> = idx.iter().map(|&i| self.items[i].label as u32).collect();
        let y = Tensor::from_vec(labels, idx.len(), model.device())?;
        Ok((x, y))
    }
}

fn self_unit(prep: &Preprocessor, it: &LabeledImage) -> Result<ImageTensor> {
    Ok(prep.unit(&ImageTensor::load(&it.path)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

/// Mean cross-entropy and accuracy over `items` in inference mode.
fn evaluate_loss(model: &Model, loader: &Loader, batch_size: usize) -> Result<(f64, f64)> {
    let n = loader.items.len();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size) {
        let (x, y) = loader.batch(model, chunk, None)?;
        let logits = model.logits(&x)?;
        let loss = candle_nn::loss::cross_entropy(&logits.to_dtype(DType::F32)?, &y)?;
        loss_sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?;
        let truth = y.to_vec1::<u32>()?;
        correct += pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Trains `model` in place and leaves it holding the weights of the epoch
/// with the lowest validation loss.
///
/// `prep` must carry normalization statistics fit on `train`. Batches are
/// reshuffled every epoch with a generator keyed on `(seed, fold, epoch)`.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    model: &Model,
    prep: &Preprocessor,
    train: &[LabeledImage],
    val: &[LabeledImage],
    hp: &HyperParams,
    seed: u64,
    fold: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if val.is_empty() {
        return Err(Error::Shape("the validation set is empty".into()));
    }
    let train_loader = Loader::new(prep, train)?;
    let val_loader = Loader::new(prep, val)?;
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: hp.learning_rate,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            weight_decay: hp.weight_decay,
        },
    )?;
    let mut monitor = Monitor::new(hp);
    let mut best = model.snapshot()?;
    let mut logs = Vec::new();
    let fold_s = fold.to_string();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        let lr = monitor.lr();
        opt.set_learning_rate(lr);
        let epoch_s = epoch.to_string();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &["shuffle", &fold_s, &epoch_s]));

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let b_s = b.to_string();
            let augment = (!prep.config().augmentation.is_empty())
                .then(|| derive_seed(seed, &["augment", &fold_s, &epoch_s, &b_s]));
            let (x, y) = train_loader.batch(model, chunk, augment)?;
            let mut ctx = Ctx::train(derive_seed(seed, &["dropout", &fold_s, &epoch_s, &b_s]));
            let logits = model.forward(&x, &mut ctx)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = to_f64_vec(&loss)?[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, what: "training" });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = evaluate_loss(model, &val_loader, hp.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, what: "validation" });
        }

        let obs = monitor.observe(val_loss);
        if obs.new_best {
            best = model.snapshot()?;
        }
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            learning_rate: lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        tracing::info!(fold, epoch, train_loss, val_loss, val_accuracy, lr, "epoch done");
        on_epoch(&log);
        logs.push(log);
        if let Some(r) = obs.stop {
            stop_reason = r;
            break;
        }
    }
    model.restore(&best)?;
    Ok(TrainOutcome {
        logs,
        best_epoch: monitor.best_epoch(),
        stop_reason,
    })
}

/// Sidecar written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub backbone: crate::Backbone,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub fold: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub feature_layer: String,
    pub preprocess: PreprocessConfig,
    pub weights_file: String,
    pub stats_file: String,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub config_hash: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Rebuilds the model and preprocessor recorded by a checkpoint descriptor.
pub fn load_checkpoint(descriptor: &Path, device: &Device) -> Result<(Model, Preprocessor, CheckpointDescriptor)> {
    let d: CheckpointDescriptor = read_json(descriptor)?;
    let dir = descriptor.parent().unwrap_or(Path::new("."));
    let spec = BackboneSpec {
        backbone: d.backbone,
        num_classes: d.num_classes,
        pretrained: false,
        feature_layer: Some(d.feature_layer.clone()),
        weights_dir: None,
        seed: d.init_seed,
    };
    let mut model = build_model(&spec, device)?;
    model.load_weights(&dir.join(&d.weights_file))?;
    let stats = NormalizationStats::load(&dir.join(&d.stats_file))?;
    let prep = Preprocessor::new(d.preprocess.clone())?.with_stats(stats)?;
    Ok((model, prep, d))
}

/// Everything one fold needs; `spec.seed` is replaced by a per-fold seed.
pub struct FoldJob<'a> {
    pub spec: &'a BackboneSpec,
    pub preprocess: &'a PreprocessConfig,
    pub hp: &'a HyperParams,
    pub seed: u64,
    pub fold: usize,
    pub classes: &'a [String],
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub out_dir: PathBuf,
    pub config_hash: &'a str,
    pub device: &'a Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedFold {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub config_hash: String,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        Error::Core(signfold_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Builds a fresh model, fits statistics on the fold's training part, trains,
/// and writes weights, statistics, descriptor, epoch log and audit log into
/// `job.out_dir`.
pub fn run_fold(job: FoldJob) -> Result<TrainedFold> {
    let fold_s = job.fold.to_string();
    let init_seed = derive_seed(job.seed, &["fold-init", &fold_s]);
    let spec = BackboneSpec {
        seed: init_seed,
        ..job.spec.clone()
    };
    let model = build_model(&spec, job.device)?;
    let base = Preprocessor::new(job.preprocess.clone())?;
    let paths: Vec<PathBuf> = job.train.iter().map(|s| s.path.clone()).collect();
    let mut stats = base.fit_stats_on_files(&paths)?;
    stats.config_hash = Some(job.config_hash.to_owned());
    let prep = base.with_stats(stats.clone())?;

    std::fs::create_dir_all(&job.out_dir).map_err(io(&job.out_dir))?;
    write_json(
        &job.out_dir.join("audit.json"),
        &Audit {
            fold: job.fold,
            train_ids: job.train.iter().map(|s| s.id.clone()).collect(),
            val_ids: job.val.iter().map(|s| s.id.clone()).collect(),
            config_hash: job.config_hash.to_owned(),
        },
    )?;
    let log_path = job.out_dir.join("epochs.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(io(&log_path))?;
    let mut write_err = None;
    let outcome = train_fold(
        &model,
        &prep,
        &job.train,
        &job.val,
        job.hp,
        job.seed,
        job.fold,
        &mut |log| {
            let line = serde_json::to_string(log).expect("epoch log serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(io(&log_path)(e));
    }

    let weights_file = "weights.safetensors";
    let stats_file = "stats.json";
    model.save(&job.out_dir.join(weights_file))?;
    stats.save(&job.out_dir.join(stats_file))?;
    let descriptor = CheckpointDescriptor {
        backbone: spec.backbone,
        num_classes: spec.num_classes,
        classes: job.classes.to_vec(),
        fold: job.fold,
        seed: job.seed,
        init_seed,
        feature_layer: spec.feature_layer().to_owned(),
        preprocess: job.preprocess.clone(),
        weights_file: weights_file.into(),
        stats_file: stats_file.into(),
        best_epoch: outcome.best_epoch,
        stop_reason: outcome.stop_reason,
        config_hash: job.config_hash.to_owned(),
    };
    let checkpoint = job.out_dir.join(CHECKPOINT_FILE);
    write_json(&checkpoint, &descriptor)?;
    Ok(TrainedFold {
        fold: job.fold,
        checkpoint,
        logs: outcome.logs,
        best_epoch: outcome.best_epoch,
        stop_reason: outcome.stop_reason,
    })
}

/// Runs every job in order. A failing fold is reported with its index and
/// does not stop the others.
pub fn run_cv(jobs: Vec<FoldJob>) -> Vec<Result<TrainedFold>> {
    jobs.into_iter()
        .map(|job| {
            let fold = job.fold;
            run_fold(job).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> HyperParams {
        HyperParams::default()
    }

    #[test]
    fn steady_improvement_keeps_the_rate() {
        let mut s = PlateauScheduler::new(1e-4, 0.1, 2, 1e-4);
        for l in [1.0, 0.5, 0.4] {
            assert_eq!(s.step(l), 1e-4);
        }
    }

    #[test]
    fn flat_losses_cut_the_rate_after_the_third_epoch() {
        let mut s = PlateauScheduler::new(1e-4, 0.1, 2, 1e-4);
        assert_eq!(s.step(1.0), 1e-4);
        assert_eq!(s.step(1.0), 1e-4);
        assert_eq!(s.step(1.0), 1e-4 * 0.1);
    }

    #[test]
    fn monotone_improvement_runs_to_max_epochs() {
        let losses: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
        let t = simulate(&hp(), &losses);
        assert_eq!(t.reason, StopReason::MaxEpochs);
        assert_eq!(t.epochs_run, 10);
        assert_eq!(t.best_epoch, 10);
        assert!(t.lrs.iter().all(|&l| l == 1e-4));
    }

    #[test]
    fn patience_three_stops_after_epoch_five() {
        let t = simulate(&hp(), &[1.0, 0.9, 0.9, 0.9, 0.9, 0.1]);
        assert_eq!(t.reason, StopReason::EarlyStop);
        assert_eq!(t.epochs_run, 5);
        assert_eq!(t.best_epoch, 2);
    }

    #[test]
    fn disabled_schedule_and_stopping() {
        let h = HyperParams {
            early_stopping: false,
            lr_schedule: LrSchedule::Constant,
            ..hp()
        };
        let t = simulate(&h, &[1.0; 10]);
        assert_eq!(t.epochs_run, 10);
        assert!(t.lrs.iter().all(|&l| l == 1e-4));
    }

    fn synthetic_items(dir: &Path, classes: usize, per_class: usize) -> Vec<LabeledImage> {
        signfold_core::synthetic::write_dataset(dir, classes, per_class, 32, 4).unwrap();
        let mut items = Vec::new();
        for c in 0..classes {
            for j in 0..per_class {
                let id = format!("class_{c:02}/img_{j:04}.png");
                items.push(LabeledImage {
                    path: dir.join(&id),
                    id,
                    label: c,
                });
            }
        }
        items
    }

    #[test]
    fn fold_run_writes_artifacts_and_restores_best_weights() {
        let dir = tempfile::tempdir().unwrap();
        let items = synthetic_items(&dir.path().join("data"), 2, 12);
        let (train, val): (Vec<_>, Vec<_>) = items.into_iter().partition(|s| !s.id.ends_with("0.png"));
        let spec = BackboneSpec::new(crate::Backbone::TinyCnn, 2);
        let pre = PreprocessConfig {
            target_height: 32,
            target_width: 32,
            ..Default::default()
        };
        let h = HyperParams {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            ..hp()
        };
        let classes = vec!["a".to_string(), "b".to_string()];
        let job = FoldJob {
            spec: &spec,
            preprocess: &pre,
            hp: &h,
            seed: 1,
            fold: 0,
            classes: &classes,
            train,
            val: val.clone(),
            out_dir: dir.path().join("fold"),
            config_hash: "h",
            device: &Device::Cpu,
        };
        let tf = run_fold(job).unwrap();
        assert!(!tf.logs.is_empty() && tf.logs.len() <= 3);
        let best = tf.logs.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(tf.logs[tf.best_epoch - 1].val_loss, best);
        let lines = std::fs::read_to_string(dir.path().join("fold/epochs.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), tf.logs.len());

        let (model, prep, d) = load_checkpoint(&tf.checkpoint, &Device::Cpu).unwrap();
        assert_eq!(d.best_epoch, tf.best_epoch);
        let loader = Loader::new(&prep, &val).unwrap();
        let (loss, _) = evaluate_loss(&model, &loader, 4).unwrap();
        assert!((loss - best).abs() < 1e-5, "{loss} vs {best}");
    }

    #[test]
    fn empty_train_set_rejected() {
        let model = build_model(&BackboneSpec::new(crate::Backbone::TinyCnn, 2), &Device::Cpu).unwrap();
        let prep = Preprocessor::new(PreprocessConfig::default()).unwrap();
        let val = vec![LabeledImage {
            id: "x".into(),
            path: "x".into(),
            label: 0,
        }];
        assert!(matches!(
            train_fold(&model, &prep, &[], &val, &hp(), 0, 0, &mut |_| {}),
            Err(Error::EmptyTrainSet)
        ));
    }
}
