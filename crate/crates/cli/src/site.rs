//! Regenerates every table and figure from a run directory's serialized
//! artifacts. Nothing here computes a metric; numbers come from the fold
//! reports and confusion-matrix files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use signfold_core::config::ExperimentConfig;
use signfold_core::error::write_json;
use signfold_core::metrics::ConfusionMatrix;
use signfold_core::report::{comparison_table, fold_table, load_baselines, render_confusion, FoldReport, Phase};

use crate::error::{PipelineError, Result};
use crate::pipeline::expect_hash;
use crate::rundir::RunDir;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSummary {
    pub index: PathBuf,
    pub tables: Vec<PathBuf>,
    pub comparison: PathBuf,
    pub confusion_figures: usize,
    pub overlays: usize,
}

pub fn confusion_title(backbone: &str, dataset: &str, phase: Phase, fold: usize) -> String {
    let set = match phase {
        Phase::Validation => "Validation",
        Phase::Test => "Test",
    };
    format!("Confusion Matrix for {backbone} ({dataset} {set} Set, Fold {fold})")
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(PipelineError::io(dir))? {
        let p = entry.map_err(PipelineError::io(dir))?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_reports(run: &RunDir) -> Result<Vec<FoldReport>> {
    let files = files_with_ext(&run.reports_dir(), "json")?;
    if files.is_empty() {
        return Err(PipelineError::StageDependency {
            stage: "report",
            producer: "evaluate",
            path: run.reports_dir(),
        });
    }
    let reports = files.iter().map(|p| FoldReport::load(p)).collect::<signfold_core::Result<Vec<_>>>()?;
    let hash = &reports[0].config_hash;
    if let Some(other) = reports.iter().find(|r| &r.config_hash != hash) {
        return Err(signfold_core::Error::InconsistentReports(format!(
            "reports come from different configs ({hash} and {})",
            other.config_hash
        ))
        .into());
    }
    Ok(reports)
}

/// Baselines come from `explicit`, else from the run's config snapshot, else none.
fn baselines_for(run: &RunDir, explicit: Option<&Path>) -> Result<Vec<signfold_core::report::ComparisonRow>> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None if run.config_snapshot().is_file() => ExperimentConfig::load(&run.config_snapshot())?.baselines(),
        None => None,
    };
    match path {
        Some(p) => Ok(load_baselines(&p)?),
        None => Ok(Vec::new()),
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<usize> {
    let mut overlays = 0;
    if !from.is_dir() {
        return Ok(0);
    }
    std::fs::create_dir_all(to).map_err(PipelineError::io(to))?;
    let mut entries: Vec<_> = std::fs::read_dir(from)
        .map_err(PipelineError::io(from))?
        .collect::<std::io::Result<_>>()
        .map_err(PipelineError::io(from))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let src = e.path();
        let dst = to.join(e.file_name());
        if src.is_dir() {
            overlays += copy_tree(&src, &dst)?;
        } else {
            std::fs::copy(&src, &dst).map_err(PipelineError::io(&src))?;
            if src.to_string_lossy().ends_with(".overlay.png") {
                overlays += 1;
            }
        }
    }
    Ok(overlays)
}

pub fn build_site(run_root: &Path, out: &Path, baselines: Option<&Path>) -> Result<SiteSummary> {
    let run = RunDir::new(run_root);
    let reports = load_reports(&run)?;
    std::fs::create_dir_all(out).map_err(PipelineError::io(out))?;
    let mut index = String::from("# Results\n\n");

    let mut groups: BTreeMap<(String, String, Phase), Vec<FoldReport>> = BTreeMap::new();
    for r in &reports {
        groups
            .entry((r.backbone.clone(), r.dataset.clone(), r.phase))
            .or_default()
            .push(r.clone());
    }
    let mut tables = Vec::new();
    for ((backbone, dataset, phase), rows) in &groups {
        let table = fold_table(rows)?;
        let stem = format!("{phase}_{backbone}_{dataset}");
        let json = out.join("tables").join(format!("{stem}.json"));
        let text = out.join("tables").join(format!("{stem}.txt"));
        table.save(&json, &text)?;
        let _ = writeln!(index, "{}\n", table.to_text());
        tables.push(text);
    }

    let comparison = comparison_table(&reports, &baselines_for(&run, baselines)?)?;
    let comparison_path = out.join("comparison.txt");
    write_json(&out.join("comparison.json"), &comparison)?;
    std::fs::write(&comparison_path, comparison.to_text()).map_err(PipelineError::io(&comparison_path))?;
    let _ = writeln!(index, "{}\n", comparison.to_text());

    let (backbone, dataset) = (&reports[0].backbone, &reports[0].dataset);
    let mut confusion_figures = 0;
    let figures = out.join("figures/confusion");
    for json in files_with_ext(&run.confusion_dir(), "json")? {
        let stem = json.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        let Some((fold, phase)) = parse_confusion_stem(&stem) else {
            continue;
        };
        let cm = ConfusionMatrix::load(&json)?;
        expect_hash(&json, cm.config_hash(), &reports[0].config_hash, "evaluate")?;
        let files = render_confusion(&cm, &confusion_title(backbone, dataset, phase, fold), &figures, &stem)?;
        let _ = writeln!(index, "![{stem}](figures/confusion/{})", file_name(&files.png));
        confusion_figures += 1;
    }

    let overlays = copy_tree(&run.root().join("figures/gradcam"), &out.join("figures/gradcam"))?;
    let _ = writeln!(index, "\nGrad-CAM overlays: {overlays} (figures/gradcam)");
    let index_path = out.join("index.md");
    std::fs::write(&index_path, index).map_err(PipelineError::io(&index_path))?;
    Ok(SiteSummary {
        index: index_path,
        tables,
        comparison: comparison_path,
        confusion_figures,
        overlays,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `fold_3_test` → (3, Test).
fn parse_confusion_stem(stem: &str) -> Option<(usize, Phase)> {
    let rest = stem.strip_prefix("fold_")?;
    let (n, phase) = rest.split_once('_')?;
    let phase = match phase {
        "test" => Phase::Test,
        "validation" => Phase::Validation,
        _ => return None,
    };
    Some((n.parse().ok()?, phase))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_stems() {
        assert_eq!(parse_confusion_stem("fold_3_test"), Some((3, Phase::Test)));
        assert_eq!(parse_confusion_stem("fold_12_validation"), Some((12, Phase::Validation)));
        assert_eq!(parse_confusion_stem("fold_x_test"), None);
        assert_eq!(parse_confusion_stem("summary"), None);
    }

    #[test]
    fn missing_reports_name_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_site(dir.path(), &dir.path().join("site"), None).unwrap_err();
        assert!(matches!(err, PipelineError::StageDependency { producer: "evaluate", .. }));
    }
}
