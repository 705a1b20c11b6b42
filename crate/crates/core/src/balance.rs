//! Per-class undersampling.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::ingest::DatasetManifest;
use crate::seed::rng_for;

/// Cap every class at `cap` samples, choosing survivors by seeded uniform
/// sampling without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalancePolicy {
    cap: usize,
    seed: u64,
}

impl BalancePolicy {
    pub fn new(cap: usize, seed: u64) -> Result<Self> {
        if cap == 0 {
            return Err(Error::InvalidArgument("balance cap must be at least 1".into()));
        }
        Ok(Self { cap, seed })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Returns a manifest where every class holds `min(count, cap)` samples.
///
/// Classes at or below the cap pass through untouched. Above-cap classes are
/// sampled from their members sorted by sample id, using a generator keyed on
/// `(seed, class name)`, so the result does not depend on manifest order or on
/// the other classes. Retained samples keep their original relative order.
pub fn undersample(m: &DatasetManifest, policy: &BalancePolicy) -> DatasetManifest {
    let mut keep = vec![false; m.samples.len()];
    for (class_idx, mut members) in m.indices_by_class().into_iter().enumerate() {
        if members.len() <= policy.cap {
            members.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        members.sort_by(|&a, &b| m.samples[a].path.cmp(&m.samples[b].path));
        let mut rng = rng_for(policy.seed, &["balance", &m.classes[class_idx]]);
        for pick in index::sample(&mut rng, members.len(), policy.cap) {
            keep[members[pick]] = true;
        }
    }
    let samples = m
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    DatasetManifest {
        samples,
        seed: Some(policy.seed),
        ..m.clone()
    }
}

/// The no-undersampling policy: every sample is preserved.
pub fn passthrough(m: &DatasetManifest) -> DatasetManifest {
    m.clone()
}
