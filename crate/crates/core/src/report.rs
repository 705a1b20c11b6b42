//! Per-fold result tables, confusion-matrix figures and the cross-study
//! comparison table.
//!
//! Renderers only format numbers they are handed; every value in a table can
//! be recomputed from the serialized [`FoldReport`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, read_json, write_json, Error, Result};
use crate::metrics::{Aggregation, ConfusionMatrix, MetricBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Validation,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validation => "validation",
            Phase::Test => "test",
        })
    }
}

/// One row of a fold table. `fold` is zero-based; tables print it one-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub backbone: String,
    pub dataset: String,
    pub fold: usize,
    pub phase: Phase,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub config_hash: String,
}

impl FoldReport {
    #[allow(clippy::too_many_arguments)]
    pub fn from_bundle(
        backbone: &str,
        dataset: &str,
        fold: usize,
        phase: Phase,
        bundle: &MetricBundle,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        Self {
            backbone: backbone.to_owned(),
            dataset: dataset.to_owned(),
            fold,
            phase,
            precision: bundle.precision,
            recall: bundle.recall,
            f1: bundle.f1,
            accuracy: bundle.accuracy,
            aggregation: bundle.aggregation,
            seed,
            config_hash: config_hash.to_owned(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("accuracy", self.accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        r.validate()?;
        Ok(r)
    }
}

/// Six decimal places, the fold-table convention.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTable {
    pub caption: String,
    pub backbone: String,
    pub dataset: String,
    pub phase: Phase,
    pub aggregation: Aggregation,
    pub rows: Vec<FoldReport>,
    /// Arithmetic means of precision, recall, F1 and accuracy over the rows.
    pub mean: [f64; 4],
    pub note: String,
}

impl FoldTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}\n", self.caption);
        let _ = writeln!(s, "| Fold | Precision | Recall | F1-Score | Accuracy |");
        let _ = writeln!(s, "|------|-----------|--------|----------|----------|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| Fold {} | {} | {} | {} | {} |",
                r.fold + 1,
                fmt6(r.precision),
                fmt6(r.recall),
                fmt6(r.f1),
                fmt6(r.accuracy)
            );
        }
        let [p, rc, f, a] = self.mean;
        let _ = writeln!(s, "| Mean | {} | {} | {} | {} |", fmt6(p), fmt6(rc), fmt6(f), fmt6(a));
        let _ = writeln!(s, "\n{}", self.note);
        s
    }

    pub fn save(&self, json: &Path, text: &Path) -> Result<()> {
        write_json(json, self)?;
        std::fs::write(text, self.to_text()).map_err(io_err(text))
    }
}

fn capitalized(p: Phase) -> &'static str {
    match p {
        Phase::Validation => "Validation",
        Phase::Test => "Test",
    }
}

/// Orders reports by fold and appends the mean row.
pub fn fold_table(reports: &[FoldReport]) -> Result<FoldTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InconsistentReports("no fold reports".into()))?;
    let mut seen = BTreeSet::new();
    for r in reports {
        if r.backbone != first.backbone {
            return Err(Error::InconsistentReports(format!(
                "mixed backbones `{}` and `{}`",
                first.backbone, r.backbone
            )));
        }
        if r.dataset != first.dataset {
            return Err(Error::InconsistentReports(format!(
                "mixed datasets `{}` and `{}`",
                first.dataset, r.dataset
            )));
        }
        if r.phase != first.phase {
            return Err(Error::InconsistentReports("mixed validation and test rows".into()));
        }
        if r.aggregation != first.aggregation {
            return Err(Error::InconsistentReports("mixed metric aggregations".into()));
        }
        if !seen.insert(r.fold) {
            return Err(Error::InconsistentReports(format!("fold {} appears twice", r.fold + 1)));
        }
        r.validate()?;
    }
    let mut rows = reports.to_vec();
    rows.sort_by_key(|r| r.fold);
    let n = rows.len() as f64;
    let mean_of = |f: fn(&FoldReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = [
        mean_of(|r| r.precision),
        mean_of(|r| r.recall),
        mean_of(|r| r.f1),
        mean_of(|r| r.accuracy),
    ];
    Ok(FoldTable {
        caption: format!(
            "{} Results for {} ({} Dataset)",
            capitalized(first.phase),
            first.backbone,
            first.dataset
        ),
        backbone: first.backbone.clone(),
        dataset: first.dataset.clone(),
        phase: first.phase,
        aggregation: first.aggregation,
        note: format!(
            "Precision, recall and F1 are {}-averaged over classes. The mean row averages the {} fold rows.",
            first.aggregation,
            rows.len()
        ),
        rows,
        mean,
    })
}

/// Cell colour on a white to dark-blue ramp; zero counts are white.
pub fn shade(count: u64, max: u64) -> [u8; 3] {
    const DARK: [f64; 3] = [8.0, 48.0, 107.0];
    if max == 0 || count == 0 {
        return [255, 255, 255];
    }
    let t = count as f64 / max as f64;
    DARK.map(|d| (255.0 - t * (255.0 - d)).round() as u8)
}

/// Unlabelled C×C grid, `cell` pixels per cell.
pub fn confusion_png(cm: &ConfusionMatrix, cell: u32) -> image::RgbImage {
    let n = cm.size() as u32;
    let max = cm.counts().iter().flatten().copied().max().unwrap_or(0);
    image::RgbImage::from_fn(n * cell, n * cell, |x, y| {
        image::Rgb(shade(cm.get((y / cell) as usize, (x / cell) as usize), max))
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Labelled grid with counts printed in each cell.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let n = cm.size();
    let cell = 28;
    let margin = 90;
    let size = margin + n * cell + 10;
    let max = cm.counts().iter().flatten().copied().max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="9">"#,
        size + 20
    );
    let _ = writeln!(s, r#"<text x="{}" y="14" font-size="12" text-anchor="middle">{}</text>"#, size / 2, xml_escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Predicted</text>"#, margin + n * cell / 2, size + 14);
    let _ = writeln!(s, r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">True</text>"#, margin + n * cell / 2, margin + n * cell / 2);
    for (i, name) in cm.classes().iter().enumerate() {
        let name = xml_escape(name);
        let c = margin + i * cell + cell / 2;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#, margin - 4, c + 3);
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="start" transform="rotate(-60 {c} {})">{name}</text>"#,
            margin - 4,
            margin - 4
        );
    }
    for i in 0..n {
        for j in 0..n {
            let v = cm.get(i, j);
            let [r, g, b] = shade(v, max);
            let (x, y) = (margin + j * cell, margin + i * cell);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#cccccc" stroke-width="0.5"/>"##
            );
            if v > 0 {
                let ink = if 2 * v > max { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v}</text>"#,
                    x + cell / 2,
                    y + cell / 2 + 3
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionFiles {
    pub png: PathBuf,
    pub svg: PathBuf,
    pub json: PathBuf,
}

/// Writes `<stem>.png`, `<stem>.svg` and `<stem>.json` into `dir`.
pub fn render_confusion(cm: &ConfusionMatrix, title: &str, dir: &Path, stem: &str) -> Result<ConfusionFiles> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = ConfusionFiles {
        png: dir.join(format!("{stem}.png")),
        svg: dir.join(format!("{stem}.svg")),
        json: dir.join(format!("{stem}.json")),
    };
    let cell = (512 / cm.size().max(1) as u32).clamp(4, 32);
    confusion_png(cm, cell).save(&files.png).map_err(|source| Error::Image {
        path: files.png.clone(),
        source,
    })?;
    std::fs::write(&files.svg, confusion_svg(cm, title)).map_err(io_err(&files.svg))?;
    cm.save(&files.json)?;
    Ok(files)
}

/// A row of the comparison table; accuracy in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub study: String,
    pub dataset: String,
    pub test_accuracy: f64,
    /// Mean test accuracy over folds, for rows computed from this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
}

/// Loads baseline rows from a CSV file with `study,dataset,test_accuracy` columns.
pub fn load_baselines(path: &Path) -> Result<Vec<ComparisonRow>> {
    #[derive(Deserialize)]
    struct Raw {
        study: String,
        dataset: String,
        test_accuracy: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let r: Raw = rec?;
        if !(0.0..=100.0).contains(&r.test_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "baseline `{}` accuracy {} is not a percentage",
                r.study, r.test_accuracy
            )));
        }
        rows.push(ComparisonRow {
            study: r.study,
            dataset: r.dataset,
            test_accuracy: r.test_accuracy,
            mean_accuracy: None,
        });
    }
    Ok(rows)
}

/// Percent with two decimals, truncated rather than rounded
/// (0.989986 prints as 98.99).
pub fn fmt_percent(pct: f64) -> String {
    let t = ((pct * 100.0) + 1e-6).floor() / 100.0;
    format!("{t:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub footnote: String,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Study | Dataset | Test Accuracy (%) | Mean over folds (%) |");
        let _ = writeln!(s, "|-------|---------|-------------------|---------------------|");
        for r in &self.rows {
            let mean = r.mean_accuracy.map(fmt_percent).unwrap_or_default();
            let _ = writeln!(s, "| {} | {} | {} | {mean} |", r.study, r.dataset, fmt_percent(r.test_accuracy));
        }
        let _ = writeln!(s, "\n{}", self.footnote);
        s
    }
}

/// Baselines first, then one row per (backbone, dataset) in this run holding
/// the best test-fold accuracy, with the fold mean alongside.
pub fn comparison_table(ours: &[FoldReport], baselines: &[ComparisonRow]) -> Result<ComparisonTable> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in ours.iter().filter(|r| r.phase == Phase::Test) {
        groups.entry((&r.backbone, &r.dataset)).or_default().push(r.accuracy);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no test-phase fold reports to compare".into()));
    }
    let mut rows = baselines.to_vec();
    for ((backbone, dataset), accs) in groups {
        let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(ComparisonRow {
            study: format!("Our Approach ({backbone})"),
            dataset: dataset.to_owned(),
            test_accuracy: best * 100.0,
            mean_accuracy: Some(mean * 100.0),
        });
    }
    Ok(ComparisonTable {
        rows,
        footnote: "Our rows: best fold, recomputed from this run's test fold reports; the fold mean is shown alongside. Baseline rows are copied from the supplied file.".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(fold: usize, acc: f64) -> FoldReport {
        FoldReport {
            backbone: "efficientnet_b2".into(),
            dataset: "toy".into(),
            fold,
            phase: Phase::Test,
            precision: acc,
            recall: acc - 0.001,
            f1: acc - 0.0005,
            accuracy: acc,
            aggregation: Aggregation::Macro,
            seed: 7,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn six_decimals() {
        assert_eq!(fmt6(0.9922500), "0.992250");
        assert_eq!(fmt6(1.0), "1.000000");
    }

    #[test]
    fn five_rows_plus_mean_in_fold_order() {
        let reports: Vec<_> = [4, 2, 0, 3, 1].iter().map(|&f| report(f, 0.9 + f as f64 * 0.01)).collect();
        let t = fold_table(&reports).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.fold).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let text = t.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("| Fold ")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("| Mean")).count(), 1);
        let mut acc = 0.0;
        for r in &reports {
            acc += r.accuracy;
        }
        assert!((t.mean[3] - acc / 5.0).abs() < 1e-15);
        assert!(text.contains("| Fold 5 | 0.940000 |"));
        assert!(t.caption.starts_with("Test Results for efficientnet_b2"));
    }

    #[test]
    fn mixed_inputs_rejected() {
        let mut other = report(1, 0.9);
        other.backbone = "resnet50".into();
        assert!(matches!(fold_table(&[report(0, 0.9), other]), Err(Error::InconsistentReports(_))));
        assert!(matches!(fold_table(&[report(0, 0.9), report(0, 0.8)]), Err(Error::InconsistentReports(_))));
        assert!(fold_table(&[]).is_err());
    }

    #[test]
    fn table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = fold_table(&[report(0, 0.91), report(1, 0.97)]).unwrap();
        t.save(&dir.path().join("t.json"), &dir.path().join("t.md")).unwrap();
        let back: FoldTable = read_json(&dir.path().join("t.json")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn diagonal_matrix_colours_only_the_diagonal() {
        let cm = ConfusionMatrix::from_counts(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]],
        )
        .unwrap();
        let img = confusion_png(&cm, 4);
        for i in 0..3u32 {
            for j in 0..3u32 {
                let px = img.get_pixel(j * 4 + 1, i * 4 + 1).0;
                assert_eq!(px == [255, 255, 255], i != j);
            }
        }
    }

    #[test]
    fn shading_follows_count_rank() {
        let lum = |c: [u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
        let max = 40;
        for a in 0..=max {
            for b in 0..=max {
                if a < b {
                    assert!(lum(shade(a, max)) > lum(shade(b, max)));
                }
            }
        }
    }

    #[test]
    fn confusion_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ConfusionMatrix::from_counts(
            vec!["x<1".into(), "y".into()],
            vec![vec![4, 1], vec![0, 7]],
        )
        .unwrap();
        let f = render_confusion(&cm, "t", dir.path(), "cm").unwrap();
        assert_eq!(ConfusionMatrix::load(&f.json).unwrap(), cm);
        assert!(std::fs::read_to_string(&f.svg).unwrap().contains("x&lt;1"));
        assert!(image::open(&f.png).is_ok());
    }

    #[test]
    fn best_fold_percent_is_truncated() {
        let accs = [0.981, 0.985, 0.987, 0.988, 0.989986];
        let reports: Vec<_> = accs.iter().enumerate().map(|(i, &a)| report(i, a)).collect();
        let t = comparison_table(&reports, &[]).unwrap();
        assert_eq!(t.rows.len(), 1);
        let best = accs.iter().copied().fold(0.0, f64::max);
        assert_eq!(t.rows[0].test_accuracy, best * 100.0);
        assert_eq!(fmt_percent(t.rows[0].test_accuracy), "98.99");
        assert!(t.to_text().contains("| 98.99 |"));
        assert!(t.footnote.contains("best fold, recomputed"));
        assert_eq!(fmt_percent(99.425), "99.42");
        assert_eq!(fmt_percent(95.0), "95.00");
    }

    #[test]
    fn baselines_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "study,dataset,test_accuracy\n").unwrap();
        assert!(load_baselines(&p).unwrap().is_empty());
        std::fs::write(&p, "study,dataset,test_accuracy\nPrior CNN, toy, 97.40\n").unwrap();
        let b = load_baselines(&p).unwrap();
        let t = comparison_table(&[report(0, 0.9)], &b).unwrap();
        assert_eq!(t.rows[0].study, "Prior CNN");
        assert_eq!(t.rows[0].test_accuracy, 97.40);
        assert_eq!(t.rows.len(), 2);
    }
}
