//! Backbone construction and pretrained-weight loading.
//!
//! Parameter names follow torchvision, so a torchvision ImageNet state dict
//! saved as `<backbone>.safetensors` (or `.pth`) in the weights directory can be
//! loaded directly. Nothing is downloaded. Classifier weights sized for the
//! 1000 ImageNet classes are never loaded; the head is always fresh.

mod efficientnet;
mod mobilenet;
mod resnet;
mod tiny;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use signfold_core::seed::derive_seed;

use crate::init::seeded_builder;
use crate::layers::{Layer, Seq};
use crate::model::Model;
use crate::{Error, Result};

pub use tiny::MAPS as TINY_MAPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[serde(rename = "mobilenet_v3_large", alias = "mobilenet_v3")]
    MobileNetV3Large,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "efficientnet_b2")]
    EfficientNetB2,
    TinyCnn,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [
        Backbone::MobileNetV3Large,
        Backbone::ResNet50,
        Backbone::EfficientNetB2,
        Backbone::TinyCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::MobileNetV3Large => "mobilenet_v3_large",
            Backbone::ResNet50 => "resnet50",
            Backbone::EfficientNetB2 => "efficientnet_b2",
            Backbone::TinyCnn => "tiny_cnn",
        }
    }

    /// The last convolutional feature map before global pooling.
    pub fn default_feature_layer(self) -> &'static str {
        match self {
            Backbone::MobileNetV3Large => "features.16",
            Backbone::ResNet50 => "layer4",
            Backbone::EfficientNetB2 => "features.8",
            Backbone::TinyCnn => "conv2",
        }
    }

    /// Prefixes of the freshly initialized, task-specific head parameters.
    fn head_prefixes(self) -> &'static [&'static str] {
        match self {
            Backbone::MobileNetV3Large => &["classifier.3."],
            Backbone::ResNet50 | Backbone::TinyCnn => &["fc."],
            Backbone::EfficientNetB2 => &["classifier.1."],
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobilenet_v3" => Ok(Backbone::MobileNetV3Large),
            _ => Backbone::ALL
                .into_iter()
                .find(|b| b.name() == s)
                .ok_or_else(|| Error::UnknownBackbone(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone: Backbone,
    pub num_classes: usize,
    pub pretrained: bool,
    /// Defaults to [`Backbone::default_feature_layer`].
    pub feature_layer: Option<String>,
    pub weights_dir: Option<PathBuf>,
    /// Seed for the fresh parameters (the head, or everything when not pretrained).
    pub seed: u64,
}

impl BackboneSpec {
    pub fn new(backbone: Backbone, num_classes: usize) -> Self {
        Self {
            backbone,
            num_classes,
            pretrained: false,
            feature_layer: None,
            weights_dir: None,
            seed: 0,
        }
    }

    pub fn feature_layer(&self) -> &str {
        self.feature_layer
            .as_deref()
            .unwrap_or_else(|| self.backbone.default_feature_layer())
    }
}

/// A named, probe-able slice of the network.
pub struct Stage {
    pub name: String,
    pub layer: Box<dyn Layer>,
}

impl Stage {
    pub fn new(name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        Self {
            name: name.into(),
            layer: Box::new(layer),
        }
    }
}

pub fn build_model(spec: &BackboneSpec, device: &Device) -> Result<Model> {
    build_model_with_dtype(spec, device, DType::F32)
}

pub fn build_model_with_dtype(spec: &BackboneSpec, device: &Device, dtype: DType) -> Result<Model> {
    if spec.num_classes < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {}", spec.num_classes)));
    }
    let varmap = VarMap::new();
    let seed = derive_seed(spec.seed, &["init", spec.backbone.name()]);
    let vb = seeded_builder(&varmap, seed, dtype, device);
    let n = spec.num_classes;
    let (stages, head): (Vec<Stage>, Seq) = match spec.backbone {
        Backbone::MobileNetV3Large => mobilenet::build(n, &vb)?,
        Backbone::ResNet50 => resnet::build(n, &vb)?,
        Backbone::EfficientNetB2 => efficientnet::build(n, &vb)?,
        Backbone::TinyCnn => tiny::build(n, &vb)?,
    };
    let layer = spec.feature_layer().to_owned();
    if !stages.iter().any(|s| s.name == layer) {
        return Err(Error::LayerNotFound {
            layer,
            available: stages.iter().map(|s| s.name.clone()).collect(),
        });
    }
    if spec.pretrained {
        load_pretrained(spec, &varmap, device, dtype)?;
    }
    Ok(Model::new(spec.clone(), stages, Box::new(head), varmap, device.clone(), dtype))
}

fn weights_file(spec: &BackboneSpec) -> Result<PathBuf> {
    let unavailable = |reason: String| Error::WeightsUnavailable {
        backbone: spec.backbone.name().to_owned(),
        reason,
    };
    let dir = spec
        .weights_dir
        .as_deref()
        .ok_or_else(|| unavailable("no weights directory configured (model.weights_dir)".into()))?;
    for ext in ["safetensors", "pth"] {
        let p = dir.join(format!("{}.{ext}", spec.backbone.name()));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(unavailable(format!(
        "neither {name}.safetensors nor {name}.pth exists in {}",
        dir.display(),
        name = spec.backbone.name()
    )))
}

fn read_tensors(path: &Path) -> candle_core::Result<HashMap<String, Tensor>> {
    if path.extension().is_some_and(|e| e == "pth") {
        Ok(candle_core::pickle::read_all(path)?.into_iter().collect())
    } else {
        candle_core::safetensors::load(path, &Device::Cpu)
    }
}

fn load_pretrained(spec: &BackboneSpec, varmap: &VarMap, device: &Device, dtype: DType) -> Result<()> {
    let path = weights_file(spec)?;
    let unavailable = |reason: String| Error::WeightsUnavailable {
        backbone: spec.backbone.name().to_owned(),
        reason: format!("{}: {reason}", path.display()),
    };
    let tensors = read_tensors(&path).map_err(|e| unavailable(e.to_string()))?;
    let head = spec.backbone.head_prefixes();
    let vars = varmap.data().lock().expect("var map lock poisoned");
    let mut missing = Vec::new();
    let mut loaded = 0;
    for (name, var) in vars.iter() {
        if head.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let Some(t) = tensors.get(name) else {
            missing.push(name.clone());
            continue;
        };
        if t.dims() != var.dims() {
            return Err(unavailable(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(dtype)?.to_device(device)?)?;
        loaded += 1;
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(unavailable(format!(
            "{} tensors missing, e.g. `{}`",
            missing.len(),
            missing[0]
        )));
    }
    tracing::info!(backbone = %spec.backbone, loaded, file = %path.display(), "loaded pretrained weights");
    Ok(())
}
