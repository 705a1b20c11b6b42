//! Stratified holdout and k-fold assignment.
//!
//! The holdout freezes a test portion once; k-fold then rotates over the
//! remaining train+val portion, so each fold trains on `k - 1` folds,
//! validates on one, and every fold model is scored on the same test set.
//! Assignments are keyed by sample id (the manifest-relative path), never by
//! position, so reordering a manifest does not change them.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::ingest::DatasetManifest;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`.
///
/// Each share is `floor(n * r)`; leftover items go to the largest fractional
/// remainders, ties broken in train, val, test order.
pub fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| n as f64 * r);
    // tolerance absorbs representation error such as 10 * 0.1 = 0.99999...
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut remainders: Vec<(usize, f64)> = quotas
        .iter()
        .zip(&counts)
        .map(|(q, &c)| q - c as f64)
        .enumerate()
        .collect();
    remainders.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let assigned: usize = counts.iter().sum();
    for &(idx, _) in remainders.iter().take(n.saturating_sub(assigned)) {
        counts[idx] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub tags: BTreeMap<String, SplitTag>,
}

impl SplitAssignment {
    pub fn tag(&self, id: &str) -> Option<SplitTag> {
        self.tags.get(id).copied()
    }

    pub fn ids(&self, tag: SplitTag) -> impl Iterator<Item = &str> {
        self.tags.iter().filter(move |(_, t)| **t == tag).map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index for every non-test sample.
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    /// (training ids, validation ids) for iteration `fold`.
    pub fn partition(&self, fold: usize) -> (Vec<&str>, Vec<&str>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (id, &f) in &self.folds {
            if f == fold {
                val.push(id.as_str());
            } else {
                train.push(id.as_str());
            }
        }
        (train, val)
    }
}

/// Minimum per-class size for which every 80:10:10 share is non-empty.
pub const MIN_CLASS_SIZE: usize = 10;

pub fn stratified_holdout(
    m: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
    allow_small: bool,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let mut tags = BTreeMap::new();
    for (class_idx, members) in m.indices_by_class().into_iter().enumerate() {
        let class = &m.classes[class_idx];
        if members.len() < MIN_CLASS_SIZE {
            if !allow_small {
                return Err(Error::StratificationInfeasible {
                    class: class.clone(),
                    reason: format!(
                        "{} samples, at least {MIN_CLASS_SIZE} needed for a stratified holdout",
                        members.len()
                    ),
                });
            }
            warn!(class = %class, size = members.len(), "small class; some splits may receive no samples");
        }
        let mut ids: Vec<&str> = members.iter().map(|&i| m.samples[i].id()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng_for(seed, &["holdout", class]));
        let [n_train, n_val, _] = apportion(ids.len(), &ratios);
        for (pos, id) in ids.into_iter().enumerate() {
            let tag = if pos < n_train {
                SplitTag::Train
            } else if pos < n_train + n_val {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
            tags.insert(id.to_owned(), tag);
        }
    }
    Ok(SplitAssignment { seed, ratios, tags })
}

/// Stratified k-fold over the train+val portion of `holdout`.
///
/// Within a class, shuffled members are dealt round-robin starting at an
/// offset equal to the number of samples dealt for earlier classes, so
/// per-class fold sizes differ by at most one and the global fold sizes stay
/// balanced as well.
pub fn stratified_kfold(
    m: &DatasetManifest,
    holdout: &SplitAssignment,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut folds = BTreeMap::new();
    let mut offset = 0usize;
    for (class_idx, members) in m.indices_by_class().into_iter().enumerate() {
        let class = &m.classes[class_idx];
        let mut ids: Vec<&str> = Vec::with_capacity(members.len());
        for &i in &members {
            let id = m.samples[i].id();
            match holdout.tag(id) {
                Some(SplitTag::Train | SplitTag::Val) => ids.push(id),
                Some(SplitTag::Test) => {}
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "sample `{id}` has no holdout assignment"
                    )))
                }
            }
        }
        if ids.len() < k {
            return Err(Error::StratificationInfeasible {
                class: class.clone(),
                reason: format!("{} samples outside the test set, fewer than k = {k}", ids.len()),
            });
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng_for(seed, &["kfold", class]));
        for (pos, id) in ids.iter().enumerate() {
            folds.insert((*id).to_owned(), (offset + pos) % k);
        }
        offset += ids.len();
    }
    Ok(FoldAssignment { k, seed, folds })
}

/// Copies split tags and fold indices into the manifest's sample records.
pub fn annotate(
    m: &DatasetManifest,
    holdout: &SplitAssignment,
    folds: Option<&FoldAssignment>,
) -> DatasetManifest {
    let mut out = m.clone();
    for s in &mut out.samples {
        s.split = holdout.tag(&s.path);
        s.fold = folds.and_then(|f| f.fold_of(&s.path));
    }
    out.seed = Some(holdout.seed);
    out
}

/// Rebuilds the assignments from an annotated manifest.
pub fn assignments_from_manifest(
    m: &DatasetManifest,
    ratios: SplitRatios,
    k: usize,
    seed: u64,
) -> Result<(SplitAssignment, FoldAssignment)> {
    let mut tags = BTreeMap::new();
    let mut folds = BTreeMap::new();
    for s in &m.samples {
        let tag = s.split.ok_or_else(|| {
            Error::InvalidArgument(format!("sample `{}` carries no split tag", s.path))
        })?;
        tags.insert(s.path.clone(), tag);
        match (tag, s.fold) {
            (SplitTag::Test, None) => {}
            (SplitTag::Test, Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "test sample `{}` must not carry a fold index",
                    s.path
                )))
            }
            (_, Some(f)) if f < k => {
                folds.insert(s.path.clone(), f);
            }
            (_, f) => {
                return Err(Error::InvalidArgument(format!(
                    "sample `{}` has fold {f:?}, expected 0..{k}",
                    s.path
                )))
            }
        }
    }
    Ok((
        SplitAssignment { seed, ratios, tags },
        FoldAssignment { k, seed, folds },
    ))
}
