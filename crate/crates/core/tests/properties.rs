use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use signfold_core::balance::{undersample, BalancePolicy};
use signfold_core::fixtures::manifest_with_counts;
use signfold_core::ingest::class_distribution;
use signfold_core::metrics::{accuracy, confusion_from_indices, precision_recall_f1, Aggregation, ConfusionMatrix};
use signfold_core::report::{comparison_table, fold_table, FoldReport, Phase};
use signfold_core::split::{apportion, stratified_holdout, stratified_kfold, SplitRatios, MIN_CLASS_SIZE};
use signfold_core::{DatasetManifest, SplitTag};

fn shuffled(m: &DatasetManifest, seed: u64) -> DatasetManifest {
    let mut out = m.clone();
    out.samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

fn per_class(m: &DatasetManifest) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in &m.samples {
        *counts.entry(s.label.clone()).or_insert(0) += 1;
    }
    counts
}

fn ids(m: &DatasetManifest) -> BTreeSet<String> {
    m.samples.iter().map(|s| s.path.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balance_caps_each_class_at_its_minimum(
        counts in prop::collection::vec(1usize..60, 1..8),
        cap in 1usize..50,
        seed in any::<u64>(),
    ) {
        let m = manifest_with_counts(&counts);
        let b = undersample(&m, &BalancePolicy::new(cap, seed).unwrap());
        let got = per_class(&b);
        for (i, &n) in counts.iter().enumerate() {
            prop_assert_eq!(got[&format!("c{i:02}")], n.min(cap));
        }
        prop_assert!(ids(&b).is_subset(&ids(&m)));
        prop_assert!(b.samples.iter().all(|s| m.samples.contains(s)));
        prop_assert!(class_distribution(&b).imbalance_ratio <= class_distribution(&m).imbalance_ratio);
        prop_assert_eq!(&undersample(&m, &BalancePolicy::new(cap, seed).unwrap()), &b);
        let from_shuffled = undersample(&shuffled(&m, seed ^ 1), &BalancePolicy::new(cap, seed).unwrap());
        prop_assert_eq!(ids(&from_shuffled), ids(&b));
    }

    #[test]
    fn holdout_partitions_every_sample_once(
        counts in prop::collection::vec(MIN_CLASS_SIZE..80, 1..6),
        seed in any::<u64>(),
    ) {
        let m = manifest_with_counts(&counts);
        let ratios = SplitRatios::default();
        let h = stratified_holdout(&m, ratios, seed, false).unwrap();
        prop_assert_eq!(h.tags.len(), m.samples.len());
        prop_assert_eq!(h.tags.keys().cloned().collect::<BTreeSet<_>>(), ids(&m));
        for (ci, &n) in counts.iter().enumerate() {
            let class = format!("c{ci:02}");
            let mut got = [0usize; 3];
            for s in m.samples.iter().filter(|s| s.label == class) {
                got[h.tag(&s.path).unwrap() as usize] += 1;
            }
            prop_assert_eq!(got.iter().sum::<usize>(), n);
            for (g, r) in got.iter().zip(ratios.as_array()) {
                prop_assert!((*g as f64 - n as f64 * r).abs() < 1.0, "class {} got {:?} of {}", class, got, n);
            }
            prop_assert_eq!(got, apportion(n, &ratios));
        }
        let again = stratified_holdout(&shuffled(&m, seed.wrapping_add(3)), ratios, seed, false).unwrap();
        prop_assert_eq!(&again, &h);
    }

    #[test]
    fn kfold_is_stratified_and_excludes_test(
        counts in prop::collection::vec(25usize..90, 1..6),
        k in 2usize..7,
        seed in any::<u64>(),
    ) {
        let m = manifest_with_counts(&counts);
        let h = stratified_holdout(&m, SplitRatios::default(), seed, false).unwrap();
        let f = stratified_kfold(&m, &h, k, seed).unwrap();
        let test: BTreeSet<&str> = h.ids(SplitTag::Test).collect();
        prop_assert!(f.folds.keys().all(|id| !test.contains(id.as_str())));
        prop_assert_eq!(f.folds.len() + test.len(), m.samples.len());

        let mut sizes = vec![0usize; k];
        for ci in 0..counts.len() {
            let class = format!("c{ci:02}");
            let mut per_fold = vec![0usize; k];
            for s in m.samples.iter().filter(|s| s.label == class) {
                if let Some(fold) = f.fold_of(&s.path) {
                    per_fold[fold] += 1;
                    sizes[fold] += 1;
                }
            }
            let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "class {} folds {:?}", class, per_fold);
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        for fold in 0..k {
            let (train, val) = f.partition(fold);
            let train: BTreeSet<&str> = train.into_iter().collect();
            prop_assert!(val.iter().all(|id| !train.contains(id)));
            prop_assert_eq!(train.len() + val.len(), f.folds.len());
        }

        let again = stratified_kfold(&shuffled(&m, seed.wrapping_add(5)), &h, k, seed).unwrap();
        prop_assert_eq!(&again, &f);
    }

    #[test]
    fn aggregates_ignore_class_order(
        n in 2usize..7,
        cells in prop::collection::vec(0u64..40, 49),
        perm_seed in any::<u64>(),
    ) {
        let classes: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let counts: Vec<Vec<u64>> = (0..n).map(|i| cells[i * n..(i + 1) * n].to_vec()).collect();
        prop_assume!(counts.iter().flatten().sum::<u64>() > 0);
        let cm = ConfusionMatrix::from_counts(classes.clone(), counts.clone()).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let p_classes = perm.iter().map(|&i| classes[i].clone()).collect();
        let p_counts = perm.iter().map(|&i| perm.iter().map(|&j| counts[i][j]).collect()).collect();
        let pm = ConfusionMatrix::from_counts(p_classes, p_counts).unwrap();

        for agg in [Aggregation::Macro, Aggregation::Weighted, Aggregation::Micro] {
            let a = precision_recall_f1(&cm, agg).unwrap();
            let b = precision_recall_f1(&pm, agg).unwrap();
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }

    #[test]
    fn per_class_f1_lies_between_precision_and_recall(
        n in 2usize..7,
        cells in prop::collection::vec(0u64..30, 49),
    ) {
        let classes: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let counts: Vec<Vec<u64>> = (0..n).map(|i| cells[i * n..(i + 1) * n].to_vec()).collect();
        prop_assume!(counts.iter().flatten().sum::<u64>() > 0);
        let cm = ConfusionMatrix::from_counts(classes, counts).unwrap();
        for c in precision_recall_f1(&cm, Aggregation::Macro).unwrap().per_class {
            prop_assert_eq!(c.f1 == 0.0, c.tp == 0);
            if !c.precision_undefined && !c.recall_undefined {
                let (lo, hi) = (c.precision.min(c.recall), c.precision.max(c.recall));
                prop_assert!(lo - 1e-12 <= c.f1 && c.f1 <= hi + 1e-12, "{:?}", c);
            }
        }
    }

    #[test]
    fn accuracy_is_the_exact_match_ratio(
        n in 2usize..9,
        pairs in prop::collection::vec((0usize..8, 0usize..8), 1..400),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % n).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % n).collect();
        let classes: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let cm = confusion_from_indices(&truth, &pred, &classes).unwrap();
        let mut matches = 0u64;
        for (t, p) in truth.iter().zip(&pred) {
            if t == p {
                matches += 1;
            }
        }
        prop_assert_eq!(accuracy(&cm).unwrap(), matches as f64 / truth.len() as f64);
    }

    #[test]
    fn fold_reports_survive_serialization(
        values in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..8),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<FoldReport> = values
            .iter()
            .enumerate()
            .map(|(i, &(p, r, f, a))| FoldReport {
                backbone: "mobilenet_v2".into(),
                dataset: "toy".into(),
                fold: i,
                phase: Phase::Test,
                precision: p,
                recall: r,
                f1: f,
                accuracy: a,
                aggregation: Aggregation::Macro,
                seed: 42,
                config_hash: "feed".into(),
            })
            .collect();
        for r in &reports {
            let path = dir.path().join(format!("{}.json", r.fold));
            r.save(&path).unwrap();
            let back = FoldReport::load(&path).unwrap();
            for (x, y) in [(r.precision, back.precision), (r.recall, back.recall), (r.f1, back.f1), (r.accuracy, back.accuracy)] {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        let table = fold_table(&reports).unwrap();
        let k = reports.len() as f64;
        let mut expect = [0.0; 4];
        for r in reports.iter().rev() {
            expect[0] += r.precision / k;
            expect[1] += r.recall / k;
            expect[2] += r.f1 / k;
            expect[3] += r.accuracy / k;
        }
        for (m, e) in table.mean.iter().zip(expect) {
            prop_assert!((m - e).abs() < 1e-12);
        }

        let cmp = comparison_table(&reports, &[]).unwrap();
        let mut best = reports[0].accuracy;
        for r in &reports[1..] {
            if r.accuracy > best {
                best = r.accuracy;
            }
        }
        prop_assert_eq!(cmp.rows.len(), 1);
        prop_assert_eq!(cmp.rows[0].test_accuracy, best * 100.0);
    }
}
