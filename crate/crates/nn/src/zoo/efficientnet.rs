//! EfficientNet-B2 (width 1.1, depth 1.2) with torchvision parameter names.

use candle_core::Tensor;
use candle_nn::{Activation, BatchNormConfig, VarBuilder};

use super::Stage;
use crate::layers::{
    make_divisible, ConvBnAct, ConvSpec, Ctx, Dropout, GlobalAvgPool, Layer, Seq, SqueezeExcite, StochasticDepth,
};

type CResult<T> = candle_core::Result<T>;

const WIDTH: f64 = 1.1;
const DEPTH: f64 = 1.2;
const STOCHASTIC_DEPTH: f64 = 0.2;

fn bn() -> BatchNormConfig {
    BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    }
}

fn width(c: usize) -> usize {
    make_divisible(c as f64 * WIDTH, 8)
}

fn depth(n: usize) -> usize {
    (n as f64 * DEPTH).ceil() as usize
}

/// (expand ratio, kernel, stride, in, out, layers) before scaling.
const BASE: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: SqueezeExcite,
    project: ConvBnAct,
    drop: StochasticDepth,
    residual: bool,
}

impl MbConv {
    fn new(
        cin: usize,
        cout: usize,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        drop: f64,
        vb: VarBuilder,
    ) -> CResult<Self> {
        let silu = Some(Activation::Silu);
        let expanded = make_divisible((cin * expand_ratio) as f64, 8);
        let vb = vb.pp("block");
        let mut j = 0;
        let mut next = || {
            j += 1;
            vb.pp(j - 1)
        };
        let expand = if expanded != cin {
            Some(ConvBnAct::sequential(ConvSpec::new(cin, expanded, 1, 1), bn(), silu, next())?)
        } else {
            None
        };
        let depthwise = ConvBnAct::sequential(ConvSpec::depthwise(expanded, kernel, stride), bn(), silu, next())?;
        let se = SqueezeExcite::new(expanded, (cin / 4).max(1), Activation::Silu, Activation::Sigmoid, next())?;
        let project = ConvBnAct::sequential(ConvSpec::new(expanded, cout, 1, 1), bn(), None, next())?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            drop: StochasticDepth(drop),
            residual: stride == 1 && cin == cout,
        })
    }
}

impl Layer for MbConv {
    fn forward(&self, xs: &Tensor, ctx: &mut Ctx) -> CResult<Tensor> {
        let mut x = match &self.expand {
            Some(e) => e.forward(xs, ctx)?,
            None => xs.clone(),
        };
        x = self.depthwise.forward(&x, ctx)?;
        x = self.se.forward(&x, ctx)?;
        x = self.project.forward(&x, ctx)?;
        if self.residual {
            x = (self.drop.apply(&x, ctx)? + xs)?;
        }
        Ok(x)
    }
}

pub(super) fn build(num_classes: usize, vb: &VarBuilder) -> CResult<(Vec<Stage>, Seq)> {
    let f = vb.pp("features");
    let silu = Some(Activation::Silu);
    let stem_out = width(32);
    let mut stages = vec![Stage::new(
        "features.0",
        ConvBnAct::sequential(ConvSpec::new(3, stem_out, 3, 2), bn(), silu, f.pp(0))?,
    )];

    let total: usize = BASE.iter().map(|s| depth(s.5)).sum();
    let mut block_id = 0;
    let mut last = stem_out;
    for (i, &(expand, kernel, stride, cin, cout, layers)) in BASE.iter().enumerate() {
        let svb = f.pp(i + 1);
        let (cin, cout) = (width(cin), width(cout));
        let mut seq = Seq::default();
        for l in 0..depth(layers) {
            let drop = STOCHASTIC_DEPTH * block_id as f64 / total as f64;
            let (bin, bstride) = if l == 0 { (cin, stride) } else { (cout, 1) };
            seq.push(MbConv::new(bin, cout, expand, kernel, bstride, drop, svb.pp(l))?);
            block_id += 1;
        }
        stages.push(Stage::new(format!("features.{}", i + 1), seq));
        last = cout;
    }
    let head_channels = 4 * last;
    stages.push(Stage::new(
        "features.8",
        ConvBnAct::sequential(ConvSpec::new(last, head_channels, 1, 1), bn(), silu, f.pp(8))?,
    ));

    let mut head = Seq::default();
    head.push(GlobalAvgPool);
    head.push(Dropout(0.3));
    head.push(candle_nn::linear(head_channels, num_classes, vb.pp("classifier").pp(1))?);
    Ok((stages, head))
}
