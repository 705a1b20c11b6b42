use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use signfold::{Overrides, Pipeline, PipelineError};
use signfold_core::config::ExperimentConfig;
use signfold_core::report::Phase;

const CONFIG: &str = r#"
seed = 7

[dataset]
name = "blobs"
root = "data"
image_size = 32

[model]
backbone = "tiny_cnn"
pretrained = false

[hyperparams]
learning_rate = 0.01
batch_size = 8
epochs = 2
"#;

/// A workspace holding `config.toml` and a pre-generated dataset, so that
/// several run directories can share identical inputs.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    signfold_core::synthetic::write_dataset(&dir.path().join("data"), 3, 30, 32, 5).unwrap();
    std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    dir
}

fn open(ws: &Path, out: &str) -> Pipeline {
    let cfg = ExperimentConfig::load(&ws.join("config.toml")).unwrap();
    let overrides = Overrides {
        output_dir: Some(ws.join(out)),
        device: None,
    };
    Pipeline::from_config(&cfg, &overrides).unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

/// Epoch logs with the wall-clock column removed.
fn without_wall_time(bytes: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn stagewise_and_one_shot_runs_agree_and_reruns_are_no_ops() {
    let ws = workspace();

    let staged = open(ws.path(), "staged");
    staged.prepare(None).unwrap();
    staged.balance().unwrap();
    staged.split().unwrap();
    staged.train(&[], false).unwrap();
    staged.evaluate(&[], &[Phase::Validation, Phase::Test]).unwrap();
    staged.explain(&[]).unwrap();
    staged.report().unwrap();
    let hash = staged.config_hash().to_owned();
    drop(staged);

    let whole = open(ws.path(), "whole");
    whole.run(None).unwrap();
    drop(whole);

    let a = files(&ws.path().join("staged"));
    let b = files(&ws.path().join("whole"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        if path.ends_with("epochs.jsonl") {
            assert_eq!(without_wall_time(bytes), without_wall_time(&b[path]), "{}", path.display());
        } else {
            assert!(bytes == &b[path], "{} differs", path.display());
        }
    }

    for (path, bytes) in &a {
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json && !path.starts_with("site") {
            let text = String::from_utf8_lossy(bytes);
            assert!(text.contains(&hash), "{} lacks the config hash", path.display());
        }
    }
    assert!(String::from_utf8_lossy(&a[Path::new("config.toml")]).starts_with(&format!("# config hash {hash}")));

    let weights = ws.path().join("whole/folds/fold_1/weights.safetensors");
    let before = std::fs::metadata(&weights).unwrap().modified().unwrap();
    let again = open(ws.path(), "whole");
    again.run(None).unwrap();
    drop(again);
    assert_eq!(std::fs::metadata(&weights).unwrap().modified().unwrap(), before);
    let c = files(&ws.path().join("whole"));
    for (path, bytes) in &b {
        assert!(bytes == &c[path], "{} changed on rerun", path.display());
    }
}

#[test]
fn split_before_balance_names_the_missing_stage() {
    let ws = workspace();
    let text = std::fs::read_to_string(ws.path().join("config.toml")).unwrap();
    std::fs::write(ws.path().join("config.toml"), text.replace("image_size = 32\n", "image_size = 32\ncap = 20\n")).unwrap();
    let p = open(ws.path(), "run");
    p.prepare(None).unwrap();
    match p.split() {
        Err(PipelineError::StageDependency { stage, producer, path }) => {
            assert_eq!((stage, producer), ("split", "balance"));
            assert!(path.ends_with("manifests/balanced.json"));
        }
        other => panic!("expected a stage dependency error, got {other:?}"),
    }
}

#[test]
fn zero_batch_size_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("batch_size = 8", "batch_size = 0");
    let err = ExperimentConfig::from_toml(&text, dir.path()).unwrap_err();
    assert!(matches!(err, signfold_core::Error::Config { .. }), "{err:?}");
    assert!(err.to_string().contains("hyperparams.batch_size"), "{err}");
}

#[test]
fn artifacts_from_another_config_are_refused() {
    let ws = workspace();
    open(ws.path(), "run").prepare(None).unwrap();
    let text = std::fs::read_to_string(ws.path().join("config.toml")).unwrap();
    std::fs::write(ws.path().join("config.toml"), text.replace("seed = 7", "seed = 8")).unwrap();
    let p = open(ws.path(), "run");
    assert!(matches!(p.balance(), Err(PipelineError::HashMismatch { producer: "prepare", .. })));
}

#[test]
fn a_second_writer_is_locked_out() {
    let ws = workspace();
    let first = open(ws.path(), "run");
    let cfg = ExperimentConfig::load(&ws.path().join("config.toml")).unwrap();
    let overrides = Overrides {
        output_dir: Some(ws.path().join("run")),
        device: None,
    };
    assert!(matches!(Pipeline::from_config(&cfg, &overrides), Err(PipelineError::Locked { .. })));
    drop(first);
    assert!(Pipeline::from_config(&cfg, &overrides).is_ok());
}

fn signfold(ws: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_signfold"))
        .args(["--log", "warn"])
        .args(args)
        .args(["-c", ws.join("config.toml").to_str().unwrap()])
        .env("SIGNFOLD_OUTPUT_DIR", ws.join("run"))
        .output()
        .unwrap()
}

#[test]
fn binary_evaluates_a_single_fold() {
    let ws = workspace();
    for args in [&["prepare"][..], &["balance"], &["split"], &["train", "--fold", "3"]] {
        let out = signfold(ws.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = signfold(ws.path(), &["evaluate", "--fold", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.starts_with("| test | Fold")).collect();
    assert_eq!(rows.len(), 1, "{stdout}");
    assert!(rows[0].starts_with("| test | Fold 3 |"));
    let reports: Vec<_> = std::fs::read_dir(ws.path().join("run/reports")).unwrap().collect();
    assert_eq!(reports.len(), 1);

    let missing = signfold(ws.path(), &["evaluate", "--fold", "2"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad = signfold(ws.path(), &["evaluate", "--fold", "9"]);
    assert_eq!(bad.status.code(), Some(1));
}
