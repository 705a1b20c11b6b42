//! Confusion matrices and precision / recall / F1 / accuracy.
//!
//! Per-class quantities use one-vs-rest counts straight from the matrix and
//! stay in integer arithmetic until the final division. F1 is evaluated as
//! `2TP / (2TP + FP + FN)`, which equals the harmonic mean of precision and
//! recall whenever that mean is defined and is 0 when TP = 0.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::ingest::SampleRecord;
use crate::preprocess::{ImageTensor, Preprocessor};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
            config_hash: None,
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "confusion counts must be {n}x{n} to match the class list"
            )));
        }
        Ok(Self {
            classes,
            counts,
            config_hash: None,
        })
    }

    /// Tags the matrix with the config hash of the run that produced it.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.config_hash.as_deref()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Sum of two matrices over the same class list.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.classes != other.classes {
            return Err(Error::Shape("cannot merge matrices over different classes".into()));
        }
        let mut out = self.clone();
        for (ra, rb) in out.counts.iter_mut().zip(&other.counts) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cm: Self = read_json(path)?;
        let hash = cm.config_hash;
        let mut out = Self::from_counts(cm.classes, cm.counts)?;
        out.config_hash = hash;
        Ok(out)
    }
}

/// Builds a matrix from string labels.
pub fn confusion<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LabelMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let index = |label: &str| {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_owned()))
    };
    let mut cm = ConfusionMatrix::zeros(classes.to_vec());
    for (t, p) in truth.iter().zip(predicted) {
        cm.record(index(t.as_ref())?, index(p.as_ref())?);
    }
    Ok(cm)
}

/// Builds a matrix from class indices.
pub fn confusion_from_indices(
    truth: &[usize],
    predicted: &[usize],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LabelMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(classes.to_vec());
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes.len() || p >= classes.len() {
            return Err(Error::UnknownClass(format!("index {}", t.max(p))));
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// `trace / total`: for a multiclass matrix this is (TP + TN) / (TP + TN + FP + FN)
/// summed over the single-label decisions.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Support-weighted mean over classes.
    Weighted,
    /// Pooled one-vs-rest counts.
    Micro,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Macro => "macro",
            Aggregation::Weighted => "weighted",
            Aggregation::Micro => "micro",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// TP + FP = 0: precision reported as 0.
    pub precision_undefined: bool,
    /// TP + FN = 0: recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub aggregation: Aggregation,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.size())
        .map(|i| {
            let tp = cm.get(i, i);
            let support = cm.row_sum(i);
            let fp = cm.col_sum(i) - tp;
            let fn_ = support - tp;
            let (precision, precision_undefined) = ratio(tp, tp + fp);
            let (recall, recall_undefined) = ratio(tp, tp + fn_);
            let (f1, _) = ratio(2 * tp, 2 * tp + fp + fn_);
            ClassMetrics {
                class: cm.classes[i].clone(),
                support,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect()
}

pub fn precision_recall_f1(cm: &ConfusionMatrix, aggregation: Aggregation) -> Result<MetricBundle> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let accuracy = accuracy(cm)?;
    let per_class = per_class_metrics(cm);
    let (precision, recall, f1) = match aggregation {
        Aggregation::Macro => {
            let n = per_class.len() as f64;
            let sum = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
            (sum(|c| c.precision), sum(|c| c.recall), sum(|c| c.f1))
        }
        Aggregation::Weighted => {
            let t = total as f64;
            let sum = |f: fn(&ClassMetrics) -> f64| {
                per_class.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / t
            };
            (sum(|c| c.precision), sum(|c| c.recall), sum(|c| c.f1))
        }
        Aggregation::Micro => {
            let tp: u64 = per_class.iter().map(|c| c.tp).sum();
            let fp: u64 = per_class.iter().map(|c| c.fp).sum();
            let fn_: u64 = per_class.iter().map(|c| c.fn_).sum();
            (
                ratio(tp, tp + fp).0,
                ratio(tp, tp + fn_).0,
                ratio(2 * tp, 2 * tp + fp + fn_).0,
            )
        }
    };
    Ok(MetricBundle {
        precision,
        recall,
        f1,
        accuracy,
        aggregation,
        per_class,
    })
}

/// Anything that maps a batch of preprocessed images to class logits.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict_logits(&self, batch: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Runs `model` over every sample (images loaded from `root` and prepared by
/// `prep`), takes the argmax prediction and scores it.
///
/// Every sample must load: a missing or corrupt test image aborts the
/// evaluation instead of silently shrinking the set.
pub fn evaluate_model<P: Predictor + ?Sized>(
    model: &P,
    samples: &[&SampleRecord],
    root: &Path,
    prep: &Preprocessor,
    classes: &[String],
    aggregation: Aggregation,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricBundle)> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if model.num_classes() != classes.len() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, evaluation set has {}",
            model.num_classes(),
            classes.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes.to_vec());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = chunk
            .par_iter()
            .map(|s| prep.prepare(&ImageTensor::load(&root.join(&s.path))?))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.predict_logits(&batch)?;
        if logits.len() != chunk.len() {
            return Err(Error::Shape(format!(
                "model returned {} logit rows for {} images",
                logits.len(),
                chunk.len()
            )));
        }
        for (s, row) in chunk.iter().zip(&logits) {
            cm.record(s.label_index, argmax(row));
        }
    }
    let bundle = precision_recall_f1(&cm, aggregation)?;
    Ok((cm, bundle))
}
