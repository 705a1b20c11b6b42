//! Folder-per-class dataset intake.
//!
//! A dataset root holds one directory per class; each class directory holds
//! image files. [`build_manifest`] walks such a tree into a [`DatasetManifest`]
//! with a deterministic layout: classes sorted by Unicode code point, samples
//! class-major and filename-sorted within each class. Images are fully decoded
//! while probing so that every listed sample is known to be readable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{io_err, read_json, write_json, Error, Result};
use crate::split::SplitTag;

/// File extensions accepted as images (compared case-insensitively).
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the manifest root, `/`-separated. Doubles as the sample id.
    pub path: String,
    pub label: String,
    pub label_index: usize,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

impl SampleRecord {
    pub fn id(&self) -> &str {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// Set when a stochastic step (balancing, splitting) produced this manifest.
    pub seed: Option<u64>,
    /// RFC 3339 timestamp of the newest ingested file, so rebuilding an
    /// unchanged tree reproduces the manifest byte for byte.
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub samples: Vec<SampleRecord>,
}

/// What happened while walking the tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildSummary {
    pub candidate_files: usize,
    pub decoded: usize,
    /// (relative path, decoder message)
    pub undecodable: Vec<(String, String)>,
    /// Files ignored because of their extension.
    pub unsupported: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDistribution {
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
    /// max count / min count; infinite when some class is empty.
    pub imbalance_ratio: f64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_path(&self, sample: &SampleRecord) -> PathBuf {
        self.root.join(&sample.path)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Sample indices grouped by `label_index`.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label_index].push(i);
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.classes.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidArgument(format!(
                    "manifest classes must be unique and sorted, found `{}` before `{}`",
                    pair[0], pair[1]
                )));
            }
        }
        for s in &self.samples {
            match self.classes.get(s.label_index) {
                Some(c) if *c == s.label => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "sample `{}` has label `{}` / index {} inconsistent with the class list",
                        s.path, s.label, s.label_index
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = read_json(path)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn build_manifest(root: &Path, dataset_name: &str) -> Result<DatasetManifest> {
    build_manifest_with_summary(root, dataset_name).map(|(m, _)| m)
}

pub fn build_manifest_with_summary(
    root: &Path,
    dataset_name: &str,
) -> Result<(DatasetManifest, BuildSummary)> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut class_dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
            warn!(path = %path.display(), "skipping class directory with a non UTF-8 name");
            continue;
        };
        if name.starts_with('.') {
            continue;
        }
        class_dirs.push(name);
    }
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    // byte order of UTF-8 strings is code point order
    class_dirs.sort();

    let mut summary = BuildSummary::default();
    let mut candidates: Vec<(usize, String)> = Vec::new();
    for (class_idx, class) in class_dirs.iter().enumerate() {
        let dir = root.join(class);
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if !entry.path().is_file() {
                continue;
            }
            let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
                warn!(path = %entry.path().display(), "skipping file with a non UTF-8 name");
                continue;
            };
            if name.starts_with('.') {
                continue;
            }
            if has_image_extension(&name) {
                files.push(name);
            } else {
                summary.unsupported.push(format!("{class}/{name}"));
            }
        }
        files.sort();
        candidates.extend(files.into_iter().map(|f| (class_idx, format!("{class}/{f}"))));
    }
    for path in &summary.unsupported {
        warn!(%path, "ignoring file with unsupported extension");
    }
    summary.candidate_files = candidates.len();

    let probed: Vec<_> = candidates
        .par_iter()
        .map(|(class_idx, rel)| {
            let full = root.join(rel);
            (*class_idx, rel.clone(), probe_image(&full))
        })
        .collect();

    let mut samples = Vec::with_capacity(probed.len());
    let mut newest: Option<SystemTime> = None;
    for (class_idx, rel, outcome) in probed {
        match outcome {
            Ok(probe) => {
                newest = Some(newest.map_or(probe.modified, |t| t.max(probe.modified)));
                samples.push(SampleRecord {
                    path: rel,
                    label: class_dirs[class_idx].clone(),
                    label_index: class_idx,
                    width: probe.width,
                    height: probe.height,
                    channels: probe.channels,
                    split: None,
                    fold: None,
                });
            }
            Err(message) => {
                warn!(path = %rel, %message, "skipping undecodable image");
                summary.undecodable.push((rel, message));
            }
        }
    }
    summary.decoded = samples.len();

    let skipped = summary.undecodable.len();
    if skipped * 100 > summary.candidate_files {
        return Err(Error::TooManyUndecodable {
            skipped,
            total: summary.candidate_files,
        });
    }
    let mut per_class = vec![0usize; class_dirs.len()];
    for s in &samples {
        per_class[s.label_index] += 1;
    }
    if let Some(idx) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(class_dirs[idx].clone()));
    }

    let created_at = newest
        .map(|t| DateTime::<Utc>::from(t).to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_default();
    info!(
        dataset = dataset_name,
        classes = class_dirs.len(),
        samples = samples.len(),
        skipped,
        unsupported = summary.unsupported.len(),
        "built manifest"
    );
    let manifest = DatasetManifest {
        dataset_name: dataset_name.to_owned(),
        root: root.to_path_buf(),
        classes: class_dirs,
        seed: None,
        created_at,
        config_hash: None,
        samples,
    };
    Ok((manifest, summary))
}

pub fn class_distribution(m: &DatasetManifest) -> ClassDistribution {
    let mut counts: BTreeMap<String, usize> = m.classes.iter().map(|c| (c.clone(), 0)).collect();
    for s in &m.samples {
        *counts.entry(s.label.clone()).or_default() += 1;
    }
    let total = counts.values().sum();
    let max = counts.values().copied().max().unwrap_or(0);
    let min = counts.values().copied().min().unwrap_or(0);
    let imbalance_ratio = if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    };
    ClassDistribution {
        counts,
        total,
        imbalance_ratio,
    }
}

fn has_image_extension(name: &str) -> bool {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

struct Probe {
    width: u32,
    height: u32,
    channels: u8,
    modified: SystemTime,
}

fn probe_image(path: &Path) -> std::result::Result<Probe, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("zero-sized image".into());
    }
    let channels = if img.color().has_color() { 3 } else { 1 };
    let modified = std::fs::metadata(path)
        .and_then(|m| m.modified())
        .map_err(|e| e.to_string())?;
    Ok(Probe {
        width: img.width(),
        height: img.height(),
        channels,
        modified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn write_gray(path: &Path, size: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        GrayImage::from_pixel(size, size, image::Luma([7])).save(path).unwrap();
    }

    #[test]
    fn single_class_tree() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.png"] {
            write_gray(&dir.path().join("alef").join(name), 4);
        }
        let m = build_manifest(dir.path(), "toy").unwrap();
        assert_eq!(m.classes, vec!["alef"]);
        assert_eq!(m.len(), 3);
        assert!(m.samples.iter().all(|s| s.label_index == 0 && s.channels == 1));
        let paths: Vec<_> = m.samples.iter().map(|s| s.path.as_str()).collect();
        assert_eq!(paths, ["alef/a.png", "alef/b.png", "alef/c.png"]);
    }

    #[test]
    fn rgb_images_record_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x").join("one.png");
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        RgbImage::from_pixel(5, 3, image::Rgb([1, 2, 3])).save(&p).unwrap();
        let m = build_manifest(dir.path(), "rgb").unwrap();
        let s = &m.samples[0];
        assert_eq!((s.width, s.height, s.channels), (5, 3, 3));
    }

    #[test]
    fn empty_root_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_manifest(dir.path(), "x"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn empty_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_gray(&dir.path().join("a").join("1.png"), 2);
        std::fs::create_dir_all(dir.path().join("b")).unwrap();
        std::fs::write(dir.path().join("b").join("notes.txt"), "hi").unwrap();
        match build_manifest(dir.path(), "x") {
            Err(Error::EmptyClass(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn undecodable_files_skip_up_to_one_percent() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..100 {
            write_gray(&dir.path().join("a").join(format!("{i:03}.png")), 2);
        }
        std::fs::write(dir.path().join("a").join("zzz.png"), b"not a png").unwrap();
        let (m, summary) = build_manifest_with_summary(dir.path(), "x").unwrap();
        assert_eq!(m.len(), 100);
        assert_eq!(summary.undecodable.len(), 1);
        assert_eq!(summary.candidate_files, 101);

        std::fs::write(dir.path().join("a").join("zzz2.png"), b"nope").unwrap();
        std::fs::write(dir.path().join("a").join("zzz3.png"), b"nope").unwrap();
        assert!(matches!(
            build_manifest(dir.path(), "x"),
            Err(Error::TooManyUndecodable { skipped: 3, total: 103 })
        ));
    }

    #[test]
    fn distribution_ratio() {
        let mk = |label: &str, idx| SampleRecord {
            path: format!("{label}/{idx}"),
            label: label.into(),
            label_index: usize::from(label == "b"),
            width: 1,
            height: 1,
            channels: 1,
            split: None,
            fold: None,
        };
        let mut samples: Vec<_> = (0..1250).map(|i| mk("a", i)).collect();
        samples.extend((0..625).map(|i| mk("b", i)));
        let m = DatasetManifest {
            dataset_name: "d".into(),
            root: PathBuf::from("."),
            classes: vec!["a".into(), "b".into()],
            seed: None,
            created_at: String::new(),
            config_hash: None,
            samples,
        };
        let d = class_distribution(&m);
        assert_eq!(d.total, 1875);
        assert_eq!(d.imbalance_ratio, 2.0);
    }
}
