//! Small in-memory manifests for tests and examples.

use std::path::PathBuf;

use crate::ingest::{DatasetManifest, SampleRecord};

/// A manifest with classes `c00, c01, ...` holding `counts[i]` samples each.
/// Sample files do not exist on disk.
pub fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
    let classes: Vec<String> = (0..counts.len()).map(|i| format!("c{i:02}")).collect();
    let mut samples = Vec::new();
    for (ci, &n) in counts.iter().enumerate() {
        for j in 0..n {
            samples.push(SampleRecord {
                path: format!("{}/{j:05}.png", classes[ci]),
                label: classes[ci].clone(),
                label_index: ci,
                width: 64,
                height: 64,
                channels: 1,
                split: None,
                fold: None,
            });
        }
    }
    DatasetManifest {
        dataset_name: "synthetic".into(),
        root: PathBuf::from("/data"),
        classes,
        seed: None,
        created_at: "2024-01-01T00:00:00Z".into(),
        config_hash: None,
        samples,
    }
}
