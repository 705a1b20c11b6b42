use std::collections::BTreeSet;
use std::path::Path;

use signfold_core::ingest::{build_manifest, build_manifest_with_summary};
use signfold_core::synthetic::write_dataset;

/// Decodable images found by a plain recursive walk, as `class/file` ids.
fn decodable_files(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for class in std::fs::read_dir(root).unwrap() {
        let class = class.unwrap().path();
        if !class.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&class).unwrap() {
            let f = f.unwrap().path();
            if image::open(&f).is_ok() {
                let c = class.file_name().unwrap().to_str().unwrap();
                let n = f.file_name().unwrap().to_str().unwrap();
                out.insert(format!("{c}/{n}"));
            }
        }
    }
    out
}

fn tree() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 4, 30, 16, 11).unwrap();
    std::fs::write(dir.path().join("class_01/notes.txt"), "not an image").unwrap();
    std::fs::write(dir.path().join("class_02/broken.png"), b"\x89PNG garbage").unwrap();
    std::fs::write(dir.path().join("README"), "top-level file").unwrap();
    dir
}

#[test]
fn manifest_lists_exactly_the_decodable_images() {
    let dir = tree();
    let (m, summary) = build_manifest_with_summary(dir.path(), "toy").unwrap();
    let listed: BTreeSet<String> = m.samples.iter().map(|s| s.path.clone()).collect();
    assert_eq!(listed, decodable_files(dir.path()));
    assert_eq!(m.samples.len(), 120);
    assert_eq!(summary.undecodable.len(), 1);
    assert_eq!(summary.unsupported, vec!["class_01/notes.txt".to_string()]);
}

#[test]
fn label_indices_follow_sorted_class_names() {
    let dir = tree();
    let m = build_manifest(dir.path(), "toy").unwrap();
    let mut sorted = m.classes.clone();
    sorted.sort();
    assert_eq!(m.classes, sorted);
    assert_eq!(m.classes.iter().collect::<BTreeSet<_>>().len(), m.classes.len());
    for s in &m.samples {
        assert_eq!(m.classes[s.label_index], s.label);
        assert!(s.path.starts_with(&format!("{}/", s.label)));
    }
}

#[test]
fn rebuilding_an_unchanged_tree_is_byte_identical() {
    let dir = tree();
    let out = tempfile::tempdir().unwrap();
    let a = out.path().join("a.json");
    let b = out.path().join("b.json");
    build_manifest(dir.path(), "toy").unwrap().save(&a).unwrap();
    build_manifest(dir.path(), "toy").unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
