//! Grad-CAM on a built model.

use candle_core::{Tensor, D};
use signfold_core::gradcam::{grad_cam, CamResult, FeatureMaps};
use signfold_core::metrics::argmax;
use signfold_core::ImageTensor;

use crate::layers::to_f64_vec;
use crate::model::Model;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The class with the largest logit.
    Predicted,
    Class(usize),
}

fn feature_maps(t: &Tensor) -> Result<FeatureMaps> {
    let (k, h, w) = t.dims3()?;
    Ok(FeatureMaps::new(k, h, w, to_f64_vec(t)?)?)
}

/// Heatmap for one prepared image, upsampled to the image's size.
pub fn explain(model: &Model, img: &ImageTensor, layer: &str, target: Target) -> Result<CamResult> {
    let x = model.batch_tensor(std::slice::from_ref(img))?;
    let class = match target {
        Target::Class(c) => c,
        Target::Predicted => argmax(&to_f64_vec(&model.logits(&x)?.squeeze(0)?)?),
    };
    let (a, g, _) = model.feature_and_gradient_probe(&x, layer, class)?;
    Ok(grad_cam(
        &feature_maps(&a)?,
        &feature_maps(&g)?,
        layer,
        class,
        img.height(),
        img.width(),
    )?)
}

/// Per-map spatial means of the probe gradient, computed on the tensor side.
pub fn pooled_gradients(g: &Tensor) -> Result<Vec<f64>> {
    Ok(to_f64_vec(&g.mean(D::Minus1)?.mean(D::Minus1)?)?)
}
