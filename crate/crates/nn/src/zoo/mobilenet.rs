//! MobileNetV3-Large with torchvision parameter names.

use candle_core::Tensor;
use candle_nn::{Activation, BatchNormConfig, VarBuilder};

use super::Stage;
use crate::layers::{make_divisible, ConvBnAct, ConvSpec, Ctx, Dropout, GlobalAvgPool, Layer, Seq, SqueezeExcite};

type CResult<T> = candle_core::Result<T>;

fn bn() -> BatchNormConfig {
    BatchNormConfig {
        eps: 1e-3,
        remove_mean: true,
        affine: true,
        momentum: 0.01,
    }
}

struct Bneck {
    cin: usize,
    kernel: usize,
    expanded: usize,
    cout: usize,
    se: bool,
    hardswish: bool,
    stride: usize,
}

const fn b(cin: usize, kernel: usize, expanded: usize, cout: usize, se: bool, hardswish: bool, stride: usize) -> Bneck {
    Bneck {
        cin,
        kernel,
        expanded,
        cout,
        se,
        hardswish,
        stride,
    }
}

const CONFIG: [Bneck; 15] = [
    b(16, 3, 16, 16, false, false, 1),
    b(16, 3, 64, 24, false, false, 2),
    b(24, 3, 72, 24, false, false, 1),
    b(24, 5, 72, 40, true, false, 2),
    b(40, 5, 120, 40, true, false, 1),
    b(40, 5, 120, 40, true, false, 1),
    b(40, 3, 240, 80, false, true, 2),
    b(80, 3, 200, 80, false, true, 1),
    b(80, 3, 184, 80, false, true, 1),
    b(80, 3, 184, 80, false, true, 1),
    b(80, 3, 480, 112, true, true, 1),
    b(112, 3, 672, 112, true, true, 1),
    b(112, 5, 672, 160, true, true, 2),
    b(160, 5, 960, 160, true, true, 1),
    b(160, 5, 960, 160, true, true, 1),
];

struct InvertedResidual {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: Option<SqueezeExcite>,
    project: ConvBnAct,
    residual: bool,
}

impl InvertedResidual {
    fn new(c: &Bneck, vb: VarBuilder) -> CResult<Self> {
        let act = Some(if c.hardswish { Activation::HardSwish } else { Activation::Relu });
        let vb = vb.pp("block");
        let mut j = 0;
        let mut next = || {
            j += 1;
            vb.pp(j - 1)
        };
        let expand = if c.expanded != c.cin {
            Some(ConvBnAct::sequential(ConvSpec::new(c.cin, c.expanded, 1, 1), bn(), act, next())?)
        } else {
            None
        };
        let depthwise = ConvBnAct::sequential(ConvSpec::depthwise(c.expanded, c.kernel, c.stride), bn(), act, next())?;
        let se = if c.se {
            let squeeze = make_divisible(c.expanded as f64 / 4.0, 8);
            Some(SqueezeExcite::new(c.expanded, squeeze, Activation::Relu, Activation::HardSigmoid, next())?)
        } else {
            None
        };
        let project = ConvBnAct::sequential(ConvSpec::new(c.expanded, c.cout, 1, 1), bn(), None, next())?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: c.stride == 1 && c.cin == c.cout,
        })
    }
}

impl Layer for InvertedResidual {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        let mut x = match &self.expand {
            Some(e) => e.forward(xs, ctx)?,
            None => xs.clone(),
        };
        x = self.depthwise.forward(&x, ctx)?;
        if let Some(se) = &self.se {
            x = se.forward(&x, ctx)?;
        }
        x = self.project.forward(&x, ctx)?;
        if self.residual {
            x = (x + xs)?;
        }
        Ok(x)
    }
}

pub(super) fn build(num_classes: usize, vb: &VarBuilder) -> CResult<(Vec<Stage>, Seq)> {
    let f = vb.pp("features");
    let hs = Some(Activation::HardSwish);
    let mut stages = vec![Stage::new(
        "features.0",
        ConvBnAct::sequential(ConvSpec::new(3, 16, 3, 2), bn(), hs, f.pp(0))?,
    )];
    for (i, c) in CONFIG.iter().enumerate() {
        stages.push(Stage::new(format!("features.{}", i + 1), InvertedResidual::new(c, f.pp(i + 1))?));
    }
    stages.push(Stage::new(
        "features.16",
        ConvBnAct::sequential(ConvSpec::new(160, 960, 1, 1), bn(), hs, f.pp(16))?,
    ));

    let c = vb.pp("classifier");
    let mut head = Seq::default();
    head.push(GlobalAvgPool);
    head.push(candle_nn::linear(960, 1280, c.pp(0))?);
    head.push(Activation::HardSwish);
    head.push(Dropout(0.2));
    head.push(candle_nn::linear(1280, num_classes, c.pp(3))?);
    Ok((stages, head))
}
