//! Building blocks shared by the backbones.

use candle_core::{DType, Module, ModuleT, Tensor, D};
use candle_nn::{Activation, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type CResult<T> = candle_core::Result<T>;

/// Forward-pass state: training flag and the generator behind dropout and
/// stochastic depth.
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A `{0, 1/keep}` mask of the given shape, each entry kept with probability `keep`.
    fn keep_mask(&mut self, dims: &[usize], keep: f64, like: &Tensor) -> CResult<Tensor> {
        let n: usize = dims.iter().product();
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Tensor::from_vec(mask, dims, like.device())?.to_dtype(like.dtype())
    }
}

pub trait Layer: Send + Sync {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor>;
}

/// Layers applied in order.
#[derive(Default)]
pub struct Seq(pub Vec<Box<dyn Layer>>);

impl Seq {
    pub fn push(&mut self, l: impl Layer + 'static) {
        self.0.push(Box::new(l));
    }
}

impl Layer for Seq {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        let mut x = xs.clone();
        for l in &self.0 {
            x = l.forward(&x, ctx)?;
        }
        Ok(x)
    }
}

impl Layer for Activation {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        Module::forward(self, xs)
    }
}

impl Layer for Linear {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        Module::forward(self, xs)
    }
}

impl Layer for Conv2d {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        Module::forward(self, xs)
    }
}

impl Layer for BatchNorm {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        self.forward_t(xs, ctx.train)
    }
}

/// Convolution without bias, batch norm, optional activation.
pub struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
    act: Option<Activation>,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride)
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

pub fn conv2d_cfg(spec: &ConvSpec) -> Conv2dConfig {
    Conv2dConfig {
        padding: spec.padding(),
        stride: spec.stride,
        dilation: 1,
        groups: spec.groups,
        cudnn_fwd_algo: None,
    }
}

impl ConvBnAct {
    /// `conv` and `bn` are looked up under `conv_vb` and `bn_vb`, which lets
    /// callers follow whichever naming the pretrained checkpoints use.
    pub fn new(
        spec: ConvSpec,
        bn_cfg: BatchNormConfig,
        act: Option<Activation>,
        conv_vb: VarBuilder,
        bn_vb: VarBuilder,
    ) -> CResult<Self> {
        let conv = candle_nn::conv2d_no_bias(spec.cin, spec.cout, spec.kernel, conv2d_cfg(&spec), conv_vb)?;
        let bn = candle_nn::batch_norm(spec.cout, bn_cfg, bn_vb)?;
        Ok(Self { conv, bn, act })
    }

    /// The torchvision `Conv2dNormActivation` layout: `<prefix>.0` conv, `<prefix>.1` norm.
    pub fn sequential(spec: ConvSpec, bn_cfg: BatchNormConfig, act: Option<Activation>, vb: VarBuilder) -> CResult<Self> {
        Self::new(spec, bn_cfg, act, vb.pp("0"), vb.pp("1"))
    }
}

impl Layer for ConvBnAct {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        let x = Module::forward(&self.conv, xs)?;
        let x = self.bn.forward_t(&x, ctx.train)?;
        match &self.act {
            Some(a) => Module::forward(a, &x),
            None => Ok(x),
        }
    }
}

/// Channel attention: global pool, 1x1 squeeze, activation, 1x1 expand, gate.
pub struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
    act: Activation,
    gate: Activation,
}

impl SqueezeExcite {
    pub fn new(channels: usize, squeeze: usize, act: Activation, gate: Activation, vb: VarBuilder) -> CResult<Self> {
        let cfg = Conv2dConfig::default();
        Ok(Self {
            fc1: candle_nn::conv2d(channels, squeeze, 1, cfg, vb.pp("fc1"))?,
            fc2: candle_nn::conv2d(squeeze, channels, 1, cfg, vb.pp("fc2"))?,
            act,
            gate,
        })
    }
}

impl Layer for SqueezeExcite {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        let s = xs.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let s = Module::forward(&self.act, &Module::forward(&self.fc1, &s)?)?;
        let s = Module::forward(&self.gate, &Module::forward(&self.fc2, &s)?)?;
        xs.broadcast_mul(&s)
    }
}

/// Seeded inverted dropout.
pub struct Dropout(pub f64);

impl Layer for Dropout {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        if !ctx.train || self.0 <= 0.0 {
            return Ok(xs.clone());
        }
        let mask = ctx.keep_mask(xs.dims(), 1.0 - self.0, xs)?;
        xs.mul(&mask)
    }
}

/// Drops whole residual branches per sample with probability `p`, rescaling survivors.
pub struct StochasticDepth(pub f64);

impl StochasticDepth {
    pub fn apply(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        if !ctx.train || self.0 <= 0.0 {
            return Ok(xs.clone());
        }
        let mut dims = vec![1; xs.rank()];
        dims[0] = xs.dim(0)?;
        let mask = ctx.keep_mask(&dims, 1.0 - self.0, xs)?;
        xs.broadcast_mul(&mask)
    }
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        xs.mean(D::Minus1)?.mean(D::Minus1)
    }
}

/// 3x3 stride-2 max pooling with one pixel of padding. Inputs must be
/// non-negative (it follows a ReLU), so zero padding acts like `-inf` padding.
pub struct MaxPoolPadded;

impl Layer for MaxPoolPadded {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        xs.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)
    }
}

pub struct AvgPool(pub usize);

impl Layer for AvgPool {
    fn forward(&self, xs: &Tensor, _: &mut Ctx) -> CResult<Tensor> {
        xs.avg_pool2d(self.0)
    }
}

/// `min(max(x, 0), 6)`.
pub fn relu6(x: f64) -> f64 {
    x.clamp(0.0, 6.0)
}

/// `x + f(x)`.
pub fn residual_forward(x: &Tensor, f: impl FnOnce(&Tensor) -> CResult<Tensor>) -> crate::Result<Tensor> {
    let r = f(x)?;
    if r.shape() != x.shape() {
        return Err(crate::Error::Shape(format!(
            "residual branch produced {:?} for input {:?}",
            r.dims(),
            x.dims()
        )));
    }
    Ok((x + r)?)
}

/// Depth, width and resolution multipliers `(alpha^phi, beta^phi, gamma^phi)`.
pub fn compound_scale(alpha: f64, beta: f64, gamma: f64, phi: f64) -> crate::Result<(f64, f64, f64)> {
    for b in [alpha, beta, gamma] {
        if !(b > 0.0) {
            return Err(crate::Error::InvalidScalingConstant(b));
        }
    }
    Ok((alpha.powf(phi), beta.powf(phi), gamma.powf(phi)))
}

/// Channel rounding used by the MobileNet family: nearest multiple of
/// `divisor`, never dropping more than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() * d;
    new_v = new_v.max(d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

pub(crate) fn to_f64_vec(t: &Tensor) -> CResult<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}
