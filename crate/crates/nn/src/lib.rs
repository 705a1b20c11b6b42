//! CNN backbones, training and gradient probing on top of candle.
//!
//! Backbones (MobileNetV3-Large, ResNet-50, EfficientNet-B2 and a two-layer
//! test network) are split into named stages so that any stage output can be
//! probed for Grad-CAM. Initialization, dropout and stochastic depth draw from
//! seeded generators, so a run is reproducible from its seed.

pub mod error;
pub mod explain;
pub mod init;
pub mod layers;
pub mod model;
pub mod trainer;
pub mod zoo;

use candle_core::Device;

pub use error::{Error, Result};
pub use layers::{compound_scale, relu6, residual_forward};
pub use model::Model;
pub use zoo::{build_model, Backbone, BackboneSpec};

/// `cpu`, `cuda` or `cuda:N`. CUDA needs the `cuda` feature.
pub fn device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Ok(Device::new_cuda(0)?),
        other => match other.strip_prefix("cuda:").and_then(|n| n.parse().ok()) {
            Some(n) => Ok(Device::new_cuda(n)?),
            None => Err(Error::Core(signfold_core::Error::InvalidArgument(format!(
                "unknown device `{other}`; use cpu, cuda or cuda:N"
            )))),
        },
    }
}
