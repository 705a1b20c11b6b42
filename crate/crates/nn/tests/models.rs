use std::path::Path;

use candle_core::Device;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use signfold_core::config::TrainConfig;
use signfold_core::{ImageTensor, PreprocessConfig, Preprocessor};
use signfold_nn::explain::{explain, Target};
use signfold_nn::trainer::{train_fold, LabeledImage};
use signfold_nn::{build_model, Backbone, BackboneSpec};

fn noise(seed: u64, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
    ImageTensor::new(size, size, 3, data).unwrap()
}

fn max_scan(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn every_backbone_gives_finite_logits_and_explains_its_prediction() {
    for backbone in Backbone::ALL {
        let model = build_model(&BackboneSpec::new(backbone, 5), &Device::Cpu).unwrap();
        let images = [noise(1, 64), noise(2, 64)];
        let logits = model.logits(&model.batch_tensor(&images).unwrap()).unwrap();
        assert_eq!(logits.dims(), &[2, 5], "{}", backbone.name());
        let rows: Vec<Vec<f32>> = logits.to_vec2().unwrap();
        assert!(rows.iter().flatten().all(|v| v.is_finite()), "{}", backbone.name());

        let cam = explain(&model, &images[0], backbone.default_feature_layer(), Target::Predicted).unwrap();
        assert_eq!(cam.target_class, max_scan(&rows[0]), "{}", backbone.name());
        assert_eq!((cam.heatmap.height, cam.heatmap.width), (64, 64));
    }
}

fn items(dir: &Path) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    signfold_core::synthetic::write_dataset(dir, 3, 8, 32, 9).unwrap();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..3 {
        for j in 0..8 {
            let id = format!("class_{c:02}/img_{j:04}.png");
            let it = LabeledImage {
                path: dir.join(&id),
                id,
                label: c,
            };
            if j < 6 { train.push(it) } else { val.push(it) }
        }
    }
    (train, val)
}

#[test]
fn same_seed_same_first_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = items(dir.path());
    let prep = Preprocessor::new(PreprocessConfig {
        target_height: 32,
        target_width: 32,
        ..Default::default()
    })
    .unwrap();
    let paths: Vec<_> = train.iter().map(|t| t.path.clone()).collect();
    let stats = prep.fit_stats_on_files(&paths).unwrap();
    let prep = prep.with_stats(stats).unwrap();
    let hp = TrainConfig {
        epochs: 1,
        batch_size: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let run = || {
        let model = build_model(&BackboneSpec::new(Backbone::TinyCnn, 3), &Device::Cpu).unwrap();
        train_fold(&model, &prep, &train, &val, &hp, 17, 0, &mut |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert!((a.logs[0].train_loss - b.logs[0].train_loss).abs() < 1e-6);
    assert!((a.logs[0].val_loss - b.logs[0].val_loss).abs() < 1e-6);
}
