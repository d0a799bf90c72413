//! Dual-stream multi-scale feature extractor. Four plain conv stages per
//! stream (stride 4, then 2/2/2) produce pyramids at strides 4/8/16/32; the
//! two streams never share activations, and share weights only in the
//! explicit fixture mode.

use serde::{Deserialize, Serialize};

use crate::blocks::Conv2dParams;
use crate::error::{Result, XmsError};
use crate::params::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const STAGE_STRIDES: [usize; 4] = [4, 2, 2, 2];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 4],
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [16, 32, 64, 128],
            in_channels: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub conv_a: Conv2dParams,
    pub conv_b: Conv2dParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<StageParams>,
}

pub fn build_encoder<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<EncoderParams> {
    let mut stages = Vec::with_capacity(4);
    let mut c_in = cfg.in_channels;
    for (i, (&c_out, stride)) in cfg.stage_channels.iter().zip(STAGE_STRIDES).enumerate() {
        let conv_a = Conv2dParams::build(
            b,
            &format!("{prefix}.stage{i}.conv_a"),
            c_out,
            c_in,
            3,
            stride,
            1,
            1,
            true,
        )?;
        let conv_b = Conv2dParams::build(
            b,
            &format!("{prefix}.stage{i}.conv_b"),
            c_out,
            c_out,
            3,
            1,
            1,
            1,
            true,
        )?;
        stages.push(StageParams { conv_a, conv_b });
        c_in = c_out;
    }
    Ok(EncoderParams { stages })
}

/// Closed-form scalar count of one encoder stream.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let mut total = 0;
    let mut c_in = cfg.in_channels;
    for &c_out in &cfg.stage_channels {
        total += Conv2dParams::count(c_out, c_in, 3, 1, true);
        total += Conv2dParams::count(c_out, c_out, 3, 1, true);
        c_in = c_out;
    }
    total
}

/// Run one stream; returns the 4-level pyramid.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    enc: &EncoderParams,
    x: NodeId,
) -> Result<[NodeId; 4]> {
    let mut cur = x;
    let mut features = Vec::with_capacity(4);
    for stage in &enc.stages {
        let a = stage.conv_a.apply(tape, params, cur)?;
        let a = tape.relu(a)?;
        let b = stage.conv_b.apply(tape, params, a)?;
        features.push(b);
        cur = b;
    }
    Ok([features[0], features[1], features[2], features[3]])
}

pub fn check_extents(shape: &[usize], in_channels: usize) -> Result<(usize, usize)> {
    match shape {
        [c, h, w] if *c == in_channels && h % 32 == 0 && w % 32 == 0 && *h >= 32 && *w >= 32 => {
            Ok((*h, *w))
        }
        s => Err(XmsError::shape(
            "encode_pair",
            format!("input must be [{in_channels}, H, W] with H, W divisible by 32, got {s:?}"),
        )),
    }
}

/// Encode both modalities with weight-independent streams.
pub fn encode_pair<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    enc_rgb: &EncoderParams,
    enc_aux: &EncoderParams,
    rgb: &Tensor<T>,
    aux: &Tensor<T>,
) -> Result<([NodeId; 4], [NodeId; 4])> {
    let in_c = rgb.shape()[0];
    check_extents(rgb.shape(), in_c)?;
    check_extents(aux.shape(), in_c)?;
    if rgb.shape() != aux.shape() {
        return Err(XmsError::shape(
            "encode_pair",
            format!("stream extents differ: {:?} vs {:?}", rgb.shape(), aux.shape()),
        ));
    }
    let xr = tape.constant(rgb);
    let xa = tape.constant(aux);
    let fr = encode(tape, params, enc_rgb, xr)?;
    let fa = encode(tape, params, enc_aux, xa)?;
    Ok((fr, fa))
}
