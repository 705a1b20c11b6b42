//! Two-convolution network with eight feature maps, for tests and smoke runs.

use candle_nn::{Activation, BatchNormConfig, VarBuilder};

use super::Stage;
use crate::layers::{AvgPool, ConvBnAct, ConvSpec, GlobalAvgPool, Seq};

pub const MAPS: usize = 8;

pub(super) fn build(num_classes: usize, vb: &VarBuilder) -> candle_core::Result<(Vec<Stage>, Seq)> {
    let bn = BatchNormConfig::default();
    let relu = Some(Activation::Relu);
    let mut conv1 = Seq::default();
    conv1.push(ConvBnAct::new(ConvSpec::new(3, MAPS, 3, 2), bn, relu, vb.pp("conv1"), vb.pp("bn1"))?);
    conv1.push(AvgPool(2));
    let conv2 = ConvBnAct::new(ConvSpec::new(MAPS, MAPS, 3, 2), bn, relu, vb.pp("conv2"), vb.pp("bn2"))?;

    let mut head = Seq::default();
    head.push(GlobalAvgPool);
    head.push(candle_nn::linear(MAPS, num_classes, vb.pp("fc"))?);
    Ok((vec![Stage::new("conv1", conv1), Stage::new("conv2", conv2)], head))
}
