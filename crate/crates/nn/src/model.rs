//! A built network: ordered named stages followed by a classification head.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, Var};
use candle_nn::VarMap;
use signfold_core::metrics::Predictor;
use signfold_core::ImageTensor;

use crate::layers::{Ctx, Layer};
use crate::zoo::{BackboneSpec, Stage};
use crate::{Error, Result};

pub struct Model {
    spec: BackboneSpec,
    stages: Vec<Stage>,
    head: Box<dyn Layer>,
    varmap: VarMap,
    device: Device,
    dtype: DType,
}

/// A deep copy of every variable, running statistics included.
#[derive(Clone)]
pub struct Snapshot(HashMap<String, Tensor>);

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl Model {
    pub(crate) fn new(
        spec: BackboneSpec,
        stages: Vec<Stage>,
        head: Box<dyn Layer>,
        varmap: VarMap,
        device: Device,
        dtype: DType,
    ) -> Self {
        Self {
            spec,
            stages,
            head,
            varmap,
            device,
            dtype,
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    fn stage_index(&self, layer: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.name == layer)
            .ok_or_else(|| Error::LayerNotFound {
                layer: layer.to_owned(),
                available: self.stages.iter().map(|s| s.name.clone()).collect(),
            })
    }

    /// Learnable parameters; batch-norm running statistics are excluded.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let data = self.varmap.data().lock().expect("var map lock poisoned");
        let mut named: Vec<_> = data.iter().filter(|(k, _)| !is_buffer(k)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn var(&self, name: &str) -> Option<Tensor> {
        let data = self.varmap.data().lock().expect("var map lock poisoned");
        data.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.forward_from(xs, 0, ctx)
    }

    fn forward_from(&self, xs: &Tensor, first_stage: usize, ctx: &mut Ctx) -> Result<Tensor> {
        let mut x = xs.clone();
        for s in &self.stages[first_stage..] {
            x = s.layer.forward(&x, ctx)?;
        }
        Ok(self.head.forward(&x, ctx)?)
    }

    /// Output of stage `layer` in inference mode.
    pub fn features(&self, xs: &Tensor, layer: &str) -> Result<Tensor> {
        let idx = self.stage_index(layer)?;
        let mut ctx = Ctx::eval();
        let mut x = xs.clone();
        for s in &self.stages[..=idx] {
            x = s.layer.forward(&x, &mut ctx)?;
        }
        Ok(x)
    }

    /// Logits computed from activations injected at the output of `layer`, in inference mode.
    pub fn logits_from_layer(&self, activations: &Tensor, layer: &str) -> Result<Tensor> {
        let idx = self.stage_index(layer)?;
        self.forward_from(activations, idx + 1, &mut Ctx::eval())
    }

    /// Inference-mode logits, `(N, num_classes)`.
    pub fn logits(&self, xs: &Tensor) -> Result<Tensor> {
        self.forward(xs, &mut Ctx::eval())
    }

    /// Stacks prepared `H x W x 3` images into an `(N, 3, H, W)` tensor.
    pub fn batch_tensor(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height(), img.width(), img.channels()) != (h, w, 3) {
                return Err(Error::Shape(format!(
                    "expected {h}x{w}x3 images, got {}x{}x{}",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
            data.extend(img.to_chw_f32());
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Activations at `layer` for a single image and the gradient of logit
    /// `class` with respect to them, both `(K, h, w)`. Runs in inference mode.
    pub fn feature_and_gradient_probe(&self, x: &Tensor, layer: &str, class: usize) -> Result<(Tensor, Tensor, Tensor)> {
        if class >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                index: class,
                num_classes: self.num_classes(),
            });
        }
        if x.dim(0)? != 1 {
            return Err(Error::Shape(format!("probe takes one image, got a batch of {}", x.dim(0)?)));
        }
        let a = Var::from_tensor(&self.features(x, layer)?.detach())?;
        let logits = self.logits_from_layer(a.as_tensor(), layer)?;
        let grads = logits.i((0, class))?.backward()?;
        let g = match grads.get(a.as_tensor()) {
            Some(g) => g.clone(),
            None => a.as_tensor().zeros_like()?,
        };
        Ok((a.as_tensor().i(0)?, g.i(0)?, logits.i(0)?.detach()))
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let data = self.varmap.data().lock().expect("var map lock poisoned");
        let mut out = HashMap::with_capacity(data.len());
        for (k, v) in data.iter() {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(Snapshot(out))
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        let data = self.varmap.data().lock().expect("var map lock poisoned");
        for (k, v) in data.iter() {
            let t = snap
                .0
                .get(k)
                .ok_or_else(|| Error::Shape(format!("snapshot lacks `{k}`")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Writes every variable, running statistics included, as safetensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        }
        self.varmap.save(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.varmap.load(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

impl Predictor for Model {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict_logits(&self, batch: &[ImageTensor]) -> signfold_core::Result<Vec<Vec<f64>>> {
        let x = self.batch_tensor(batch)?;
        let logits = self.logits(&x)?;
        let rows = logits
            .to_dtype(DType::F64)
            .and_then(|l| l.to_vec2::<f64>())
            .map_err(Error::from)?;
        Ok(rows)
    }
}
