//! ResNet-50 with torchvision parameter names (stride on the 3x3 conv).

use candle_core::Tensor;
use candle_nn::{Activation, BatchNormConfig, VarBuilder};

use super::Stage;
use crate::layers::{ConvBnAct, ConvSpec, Ctx, GlobalAvgPool, Layer, MaxPoolPadded, Seq};

type CResult<T> = candle_core::Result<T>;

fn bn() -> BatchNormConfig {
    BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    }
}

struct Bottleneck {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
    conv3: ConvBnAct,
    downsample: Option<ConvBnAct>,
}

impl Bottleneck {
    fn new(cin: usize, width: usize, stride: usize, vb: VarBuilder) -> CResult<Self> {
        let cout = width * 4;
        let relu = Some(Activation::Relu);
        let downsample = if stride != 1 || cin != cout {
            Some(ConvBnAct::sequential(ConvSpec::new(cin, cout, 1, stride), bn(), None, vb.pp("downsample"))?)
        } else {
            None
        };
        Ok(Self {
            conv1: ConvBnAct::new(ConvSpec::new(cin, width, 1, 1), bn(), relu, vb.pp("conv1"), vb.pp("bn1"))?,
            conv2: ConvBnAct::new(ConvSpec::new(width, width, 3, stride), bn(), relu, vb.pp("conv2"), vb.pp("bn2"))?,
            conv3: ConvBnAct::new(ConvSpec::new(width, cout, 1, 1), bn(), None, vb.pp("conv3"), vb.pp("bn3"))?,
            downsample,
        })
    }
}

impl Layer for Bottleneck {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        let out = self.conv1.forward(xs, ctx)?;
        let out = self.conv2.forward(&out, ctx)?;
        let out = self.conv3.forward(&out, ctx)?;
        let identity = match &self.downsample {
            Some(d) => d.forward(xs, ctx)?,
            None => xs.clone(),
        };
        (out + identity)?.relu()
    }
}

pub(super) fn build(num_classes: usize, vb: &VarBuilder) -> CResult<(Vec<Stage>, Seq)> {
    let mut stem = Seq::default();
    stem.push(ConvBnAct::new(
        ConvSpec::new(3, 64, 7, 2),
        bn(),
        Some(Activation::Relu),
        vb.pp("conv1"),
        vb.pp("bn1"),
    )?);
    stem.push(MaxPoolPadded);
    let mut stages = vec![Stage::new("stem", stem)];

    let mut cin = 64;
    for (i, (width, blocks, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)].into_iter().enumerate() {
        let name = format!("layer{}", i + 1);
        let lvb = vb.pp(&name);
        let mut seq = Seq::default();
        for b in 0..blocks {
            seq.push(Bottleneck::new(cin, width, if b == 0 { stride } else { 1 }, lvb.pp(b))?);
            cin = width * 4;
        }
        stages.push(Stage::new(name, seq));
    }

    let mut head = Seq::default();
    head.push(GlobalAvgPool);
    head.push(candle_nn::linear(2048, num_classes, vb.pp("fc"))?);
    Ok((stages, head))
}
