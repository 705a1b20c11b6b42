//! Grad-CAM files for single images and per-fold galleries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signfold_core::error::write_json;
use signfold_core::gradcam::{overlay, Heatmap};
use signfold_core::metrics::{argmax, Predictor};
use signfold_core::{ImageTensor, Preprocessor, SampleRecord};
use signfold_nn::explain::{explain, Target};
use signfold_nn::trainer::CheckpointDescriptor;
use signfold_nn::Model;

use crate::error::{PipelineError, Result};

/// Provenance written next to every overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub image: String,
    pub checkpoint: PathBuf,
    pub layer: String,
    pub target_class: usize,
    pub target_label: String,
    pub predicted_class: usize,
    pub true_label: Option<String>,
    pub alphas: Vec<f64>,
    pub opacity: f64,
    pub zero_saliency: bool,
    /// File names, relative to this record.
    pub overlay: String,
    pub heatmap: String,
    /// Rectified map at feature-layer resolution, before upsampling.
    pub raw_map: Heatmap,
    pub config_hash: String,
}

/// `auto` (the predicted class), a class name, or a class index.
pub fn parse_target(s: &str, classes: &[String]) -> Result<Target> {
    if s == "auto" || s == "predicted" {
        return Ok(Target::Predicted);
    }
    if let Some(i) = classes.iter().position(|c| c == s) {
        return Ok(Target::Class(i));
    }
    match s.parse::<usize>() {
        Ok(i) if i < classes.len() => Ok(Target::Class(i)),
        _ => Err(signfold_core::Error::UnknownClass(s.to_owned()).into()),
    }
}

/// File-name-safe stem for a sample id such as `alef/img_01.png`.
pub fn stem_for(id: &str) -> String {
    let no_ext = id.rsplit_once('.').map_or(id, |(s, _)| s);
    no_ext.replace(['/', '\\'], "__")
}

#[allow(clippy::too_many_arguments)]
pub fn explain_image(
    model: &Model,
    prep: &Preprocessor,
    desc: &CheckpointDescriptor,
    checkpoint: &Path,
    image: &Path,
    image_name: &str,
    true_label: Option<&str>,
    layer: &str,
    target: Target,
    opacity: f64,
    out_dir: &Path,
    stem: &str,
) -> Result<CamRecord> {
    let unit = prep.unit(&ImageTensor::load(image)?)?;
    let x = prep.standardized(&unit)?;
    let logits = model.predict_logits(std::slice::from_ref(&x))?.remove(0);
    let cam = explain(model, &x, layer, target)?;

    std::fs::create_dir_all(out_dir).map_err(PipelineError::io(out_dir))?;
    let overlay_name = format!("{stem}.overlay.png");
    let heatmap_name = format!("{stem}.heatmap.png");
    let overlay_path = out_dir.join(&overlay_name);
    let heatmap_path = out_dir.join(&heatmap_name);
    let shown = unit.clone().map(|v| v * 255.0).to_rgb8();
    let save_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Core(signfold_core::Error::Image { path, source })
    };
    overlay(&shown, &cam.heatmap, opacity)?
        .save(&overlay_path)
        .map_err(save_err(&overlay_path))?;
    cam.heatmap.to_gray8().save(&heatmap_path).map_err(save_err(&heatmap_path))?;

    let record = CamRecord {
        image: image_name.to_owned(),
        checkpoint: checkpoint.to_path_buf(),
        layer: layer.to_owned(),
        target_class: cam.target_class,
        target_label: desc.classes[cam.target_class].clone(),
        predicted_class: argmax(&logits),
        true_label: true_label.map(str::to_owned),
        alphas: cam.weights.alpha.clone(),
        opacity,
        zero_saliency: cam.zero_saliency,
        overlay: overlay_name,
        heatmap: heatmap_name,
        raw_map: cam.raw,
        config_hash: desc.config_hash.clone(),
    };
    write_json(&out_dir.join(format!("{stem}.json")), &record)?;
    Ok(record)
}

/// Explains each sample for its predicted class.
#[allow(clippy::too_many_arguments)]
pub fn gallery(
    model: &Model,
    prep: &Preprocessor,
    desc: &CheckpointDescriptor,
    checkpoint: &Path,
    samples: &[&SampleRecord],
    root: &Path,
    layer: &str,
    opacity: f64,
    out_dir: &Path,
) -> Result<Vec<CamRecord>> {
    samples
        .iter()
        .map(|s| {
            explain_image(
                model,
                prep,
                desc,
                checkpoint,
                &root.join(&s.path),
                s.id(),
                Some(&s.label),
                layer,
                Target::Predicted,
                opacity,
                out_dir,
                &stem_for(s.id()),
            )
        })
        .collect()
}
