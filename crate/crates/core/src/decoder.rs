//! Coarse-to-fine decoding. A multi-window pooling block widens the
//! receptive field, a cross-layer merge multiplies in the deeper feature, a
//! small head emits the coarse logits, and a masked channel attention
//! refines each layer's feature by querying both encoder streams against
//! the masked shared feature. Refined layers then pair up into low/mid/high
//! outputs.

use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2dParams, MlpParams};
use crate::error::{Result, XmsError};
use crate::params::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Channel expansion factor inside the pooling block.
    pub lgm_expansion: usize,
    /// Number of channel subparts, one pooling window each.
    pub lgm_subparts: usize,
    /// Same-resolution max-pool window per subpart.
    pub lgm_windows: Vec<usize>,
    /// Replace the masked attention with the plain masked residual.
    pub use_msa: bool,
    /// Build the low/mid/high aggregation ladder.
    pub use_multilevel: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            lgm_expansion: 2,
            lgm_subparts: 4,
            lgm_windows: vec![1, 3, 5, 7],
            use_msa: true,
            use_multilevel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LgmParams {
    pub expand: Conv2dParams,
    pub depthwise: Conv2dParams,
    pub reduce: Conv2dParams,
    pub subparts: usize,
    pub windows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FmParams {
    pub proj: Option<Conv2dParams>,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub conv3: Conv2dParams,
    pub conv1: Conv2dParams,
}

#[derive(Debug, Clone)]
pub struct MsaParams {
    pub q_rgb: Conv2dParams,
    pub q_aux: Conv2dParams,
    pub q_merge: Conv2dParams,
    pub key: Conv2dParams,
    pub value: Conv2dParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub channels: usize,
    pub lgm: LgmParams,
    pub fm: FmParams,
    pub head: HeadParams,
    pub msa: Option<MsaParams>,
}

#[derive(Debug, Clone)]
pub struct MultiLevelParams {
    pub merge: [Conv2dParams; 3],
    pub heads: [HeadParams; 3],
}

pub fn build_head<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    name: &str,
    c: usize,
) -> Result<HeadParams> {
    Ok(HeadParams {
        conv3: Conv2dParams::build(b, &format!("{name}.conv3"), c, c, 3, 1, 1, 1, true)?,
        conv1: Conv2dParams::build(b, &format!("{name}.conv1"), 1, c, 1, 1, 0, 1, true)?,
    })
}

pub fn head_param_count(c: usize) -> usize {
    Conv2dParams::count(c, c, 3, 1, true) + Conv2dParams::count(1, c, 1, 1, true)
}

fn build_lgm<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    name: &str,
    c: usize,
    cfg: &DecoderConfig,
) -> Result<LgmParams> {
    let ec = cfg.lgm_expansion * c;
    if ec % cfg.lgm_subparts != 0 {
        return Err(XmsError::Config(format!(
            "expanded channels {ec} not divisible into {} subparts",
            cfg.lgm_subparts
        )));
    }
    if cfg.lgm_windows.len() != cfg.lgm_subparts {
        return Err(XmsError::Config(format!(
            "{} pooling windows for {} subparts",
            cfg.lgm_windows.len(),
            cfg.lgm_subparts
        )));
    }
    Ok(LgmParams {
        expand: Conv2dParams::build(b, &format!("{name}.expand"), ec, c, 1, 1, 0, 1, true)?,
        depthwise: Conv2dParams::build(b, &format!("{name}.depthwise"), ec, ec, 3, 1, 1, ec, true)?,
        reduce: Conv2dParams::build(b, &format!("{name}.reduce"), c, ec, 1, 1, 0, 1, true)?,
        subparts: cfg.lgm_subparts,
        windows: cfg.lgm_windows.clone(),
    })
}

/// Per-layer decoder parameters. `c_next` is the channel count of the next
/// (deeper) layer, absent at the deepest layer where the averaged feature
/// stands in.
pub fn build_decoder_layer<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    name: &str,
    c: usize,
    c_next: Option<usize>,
    cfg: &DecoderConfig,
) -> Result<DecoderLayerParams> {
    let lgm = build_lgm(b, &format!("{name}.lgm"), c, cfg)?;
    let proj = match c_next {
        Some(cn) if cn != c => Some(Conv2dParams::build(
            b,
            &format!("{name}.fm.proj"),
            c,
            cn,
            1,
            1,
            0,
            1,
            true,
        )?),
        _ => None,
    };
    let fm = FmParams {
        proj,
        mlp: MlpParams::build(b, &format!("{name}.fm.mlp"), c, c, c)?,
    };
    let head = build_head(b, &format!("{name}.head"), c)?;
    let msa = if cfg.use_msa {
        Some(MsaParams {
            q_rgb: Conv2dParams::build(b, &format!("{name}.msa.q_rgb"), c, c, 1, 1, 0, 1, true)?,
            q_aux: Conv2dParams::build(b, &format!("{name}.msa.q_aux"), c, c, 1, 1, 0, 1, true)?,
            q_merge: Conv2dParams::build(b, &format!("{name}.msa.q_merge"), c, 2 * c, 3, 1, 1, 1, true)?,
            // bias-free so a zero mask annihilates keys and values exactly
            key: Conv2dParams::build(b, &format!("{name}.msa.key"), c, c, 1, 1, 0, 1, false)?,
            value: Conv2dParams::build(b, &format!("{name}.msa.value"), c, c, 1, 1, 0, 1, false)?,
        })
    } else {
        None
    };
    Ok(DecoderLayerParams { channels: c, lgm, fm, head, msa })
}

/// Closed-form scalar count of one decoder layer.
pub fn decoder_layer_param_count(c: usize, c_next: Option<usize>, cfg: &DecoderConfig) -> usize {
    let ec = cfg.lgm_expansion * c;
    let mut total = Conv2dParams::count(ec, c, 1, 1, true)
        + Conv2dParams::count(ec, ec, 3, ec, true)
        + Conv2dParams::count(c, ec, 1, 1, true);
    if let Some(cn) = c_next {
        if cn != c {
            total += Conv2dParams::count(c, cn, 1, 1, true);
        }
    }
    total += MlpParams::count(c, c, c);
    total += head_param_count(c);
    if cfg.use_msa {
        total += 2 * Conv2dParams::count(c, c, 1, 1, true)
            + Conv2dParams::count(c, 2 * c, 3, 1, true)
            + 2 * Conv2dParams::count(c, c, 1, 1, false);
    }
    total
}

pub fn build_multilevel<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    name: &str,
    stage_channels: &[usize; 4],
) -> Result<MultiLevelParams> {
    let [c1, c2, c3, c4] = *stage_channels;
    let merge = [
        Conv2dParams::build(b, &format!("{name}.low.merge"), c3, c4 + c3, 3, 1, 1, 1, true)?,
        Conv2dParams::build(b, &format!("{name}.mid.merge"), c2, c3 + c2, 3, 1, 1, 1, true)?,
        Conv2dParams::build(b, &format!("{name}.high.merge"), c1, c2 + c1, 3, 1, 1, 1, true)?,
    ];
    let heads = [
        build_head(b, &format!("{name}.low.head"), c3)?,
        build_head(b, &format!("{name}.mid.head"), c2)?,
        build_head(b, &format!("{name}.high.head"), c1)?,
    ];
    Ok(MultiLevelParams { merge, heads })
}

pub fn multilevel_param_count(stage_channels: &[usize; 4]) -> usize {
    let [c1, c2, c3, c4] = *stage_channels;
    Conv2dParams::count(c3, c4 + c3, 3, 1, true)
        + Conv2dParams::count(c2, c3 + c2, 3, 1, true)
        + Conv2dParams::count(c1, c2 + c1, 3, 1, true)
        + head_param_count(c3)
        + head_param_count(c2)
        + head_param_count(c1)
}

/// Multi-window pooling block: expand channels, pool each subpart at its own
/// window (same resolution), merge locally with a depthwise conv, reduce.
pub fn lgm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &LgmParams,
    x: NodeId,
) -> Result<NodeId> {
    let expanded = p.expand.apply(tape, params, x)?;
    let chunks = tape.chunk_channels(expanded, p.subparts)?;
    let mut pooled = Vec::with_capacity(p.subparts);
    for (chunk, &win) in chunks.iter().zip(&p.windows) {
        pooled.push(tape.max_pool2d(*chunk, win, 1, win / 2)?);
    }
    let cat = tape.concat_channels(&pooled)?;
    let local = p.depthwise.apply(tape, params, cat)?;
    p.reduce.apply(tape, params, local)
}

/// Cross-layer merge: project the deeper feature to this layer's channels,
/// upsample, multiply into the pooled feature, and mix with a token MLP.
pub fn fm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &FmParams,
    f_next: NodeId,
    lg: NodeId,
) -> Result<NodeId> {
    let (_, h, w) = match tape.shape(lg) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(XmsError::shape("fm", format!("rank {s:?}"))),
    };
    let mut nxt = f_next;
    if let Some(proj) = &p.proj {
        nxt = proj.apply(tape, params, nxt)?;
    }
    if tape.shape(nxt)[0] != tape.shape(lg)[0] {
        return Err(XmsError::shape(
            "fm",
            format!("channels {:?} vs {:?}", tape.shape(nxt), tape.shape(lg)),
        ));
    }
    let up = tape.bilinear_resize(nxt, h, w)?;
    let prod = tape.mul(up, lg)?;
    let tokens = tape.to_tokens(prod)?;
    let mixed = p.mlp.apply(tape, params, tokens)?;
    tape.from_tokens(mixed, h, w)
}

/// The deepest layer has no deeper neighbour; its stand-in is the feature's
/// own spatial average broadcast back to full extent.
pub fn deepest_stand_in<T: Scalar>(tape: &mut Tape<T>, f_s: NodeId) -> Result<NodeId> {
    let (c, h, w) = match tape.shape(f_s) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(XmsError::shape("deepest_stand_in", format!("rank {s:?}"))),
    };
    let mean = tape.global_avg_pool(f_s)?;
    let ones = tape.constant(&Tensor::full(vec![c, h, w], T::one()));
    tape.broadcast_mul(ones, mean)
}

/// Prediction head: 3x3 conv, ReLU, 1x1 conv to raw logits.
pub fn head<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &HeadParams,
    f: NodeId,
) -> Result<NodeId> {
    let a = p.conv3.apply(tape, params, f)?;
    let a = tape.relu(a)?;
    p.conv1.apply(tape, params, a)
}

/// Masked channel attention with an explicit mask map `[1,h,w]`.
pub fn msa_with_mask<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &MsaParams,
    f_rgb_enc: NodeId,
    f_aux_enc: NodeId,
    mask: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    let (c, h, w) = match tape.shape(f) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(XmsError::shape("msa", format!("rank {s:?}"))),
    };
    if tape.shape(f_rgb_enc) != tape.shape(f) || tape.shape(f_aux_enc) != tape.shape(f) {
        return Err(XmsError::shape(
            "msa",
            format!(
                "encoder features {:?}/{:?} must match {:?}",
                tape.shape(f_rgb_enc),
                tape.shape(f_aux_enc),
                tape.shape(f)
            ),
        ));
    }
    let hw = h * w;
    let masked = tape.broadcast_mul(f, mask)?;

    let qi = p.q_rgb.apply(tape, params, f_rgb_enc)?;
    let qd = p.q_aux.apply(tape, params, f_aux_enc)?;
    let qcat = tape.concat_channels(&[qi, qd])?;
    let qmap = p.q_merge.apply(tape, params, qcat)?;
    let q = tape.reshape(qmap, vec![c, hw])?;

    let kmap = p.key.apply(tape, params, masked)?;
    let k = tape.reshape(kmap, vec![c, hw])?;
    let vmap = p.value.apply(tape, params, masked)?;
    let v = tape.reshape(vmap, vec![c, hw])?;

    let kt = tape.transpose2d(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.affine(scores, 1.0 / (hw as f64).sqrt(), 0.0)?;
    let attn = tape.softmax(scaled, 1)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.reshape(mixed, vec![c, h, w])?;
    tape.add(out, masked)
}

/// Masked channel attention on coarse logits (mask = sigmoid of logits).
pub fn msa<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &MsaParams,
    f_rgb_enc: NodeId,
    f_aux_enc: NodeId,
    logits: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    let mask = tape.sigmoid(logits)?;
    msa_with_mask(tape, params, p, f_rgb_enc, f_aux_enc, mask, f)
}

/// Refinement without attention: just the masked residual.
pub fn masked_residual<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    let mask = tape.sigmoid(logits)?;
    tape.broadcast_mul(f, mask)
}

/// Pair the refined layers coarse-to-fine into low/mid/high features and
/// logits: low = (4,3), mid = (low,2), high = (mid,1).
pub fn multilevel_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    p: &MultiLevelParams,
    refined: &[NodeId; 4],
) -> Result<[(NodeId, NodeId); 3]> {
    let mut out = Vec::with_capacity(3);
    let mut carry = refined[3];
    for (step, finer) in [refined[2], refined[1], refined[0]].iter().enumerate() {
        let (_, h, w) = match tape.shape(*finer) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(XmsError::shape("multilevel", format!("rank {s:?}"))),
        };
        let up = tape.bilinear_resize(carry, h, w)?;
        let cat = tape.concat_channels(&[up, *finer])?;
        let feat = p.merge[step].apply(tape, params, cat)?;
        let logits = head(tape, params, &p.heads[step], feat)?;
        out.push((logits, feat));
        carry = feat;
    }
    Ok([out[0], out[1], out[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use approx::assert_relative_eq;

    fn pseudo(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.613 + phase).sin()).collect()
    }

    fn layer_fixture(
        c: usize,
        c_next: Option<usize>,
        init: Init,
    ) -> (ParamSet<f64>, DecoderLayerParams) {
        let mut set = ParamSet::new();
        let mut b = ParamBuilder::new(&mut set, init, 17);
        let layer = build_decoder_layer(&mut b, "dec.l0", c, c_next, &DecoderConfig::default())
            .unwrap();
        (set, layer)
    }

    #[test]
    fn lgm_constant_input_is_affine_constant() {
        // zero-weight fixture with biases: the constant input rides through
        // every pool branch unchanged and the output is the reduce bias
        let (mut set, layer) = layer_fixture(4, None, Init::Zeros);
        set.by_name_mut("dec.l0.lgm.reduce.bias").unwrap().value =
            Tensor::from_f64(vec![4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(vec![4, 8, 8], 0.6));
        let y = lgm(&mut tape, &set, &layer.lgm, x).unwrap();
        let d = tape.data(y);
        for ch in 0..4 {
            for i in 0..64 {
                assert_relative_eq!(d[ch * 64 + i], 0.1 * (ch + 1) as f64, epsilon = 1e-12);
            }
        }
        // under arbitrary weights the interior stays spatially constant
        let (set2, layer2) = layer_fixture(4, None, Init::KaimingUniform);
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.constant(&Tensor::full(vec![4, 8, 8], 0.6));
        let y2 = lgm(&mut tape2, &set2, &layer2.lgm, x2).unwrap();
        let d2 = tape2.data(y2);
        for ch in 0..4 {
            let v0 = d2[ch * 64 + 3 * 8 + 3];
            for yy in 3..5 {
                for xx in 3..5 {
                    assert_relative_eq!(d2[ch * 64 + yy * 8 + xx], v0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn lgm_window_one_subpart_is_identity_branch() {
        let (set, layer) = layer_fixture(2, None, Init::KaimingUniform);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![2, 4, 4], &pseudo(32, 0.5)).unwrap());
        let expanded = layer.lgm.expand.apply(&mut tape, &set, x).unwrap();
        let chunks = tape.chunk_channels(expanded, layer.lgm.subparts).unwrap();
        let pooled = tape.max_pool2d(chunks[0], 1, 1, 0).unwrap();
        assert_eq!(tape.data(pooled), tape.data(chunks[0]));
    }

    #[test]
    fn lgm_matches_branchwise_oracle() {
        let (set, layer) = layer_fixture(2, None, Init::KaimingUniform);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![2, 4, 4], &pseudo(32, 0.9)).unwrap());
        let got = lgm(&mut tape, &set, &layer.lgm, x).unwrap();
        // oracle: replay the pipeline branch by branch
        let expanded = layer.lgm.expand.apply(&mut tape, &set, x).unwrap();
        let chunks = tape.chunk_channels(expanded, 4).unwrap();
        let mut pooled = Vec::new();
        for (i, win) in [1usize, 3, 5, 7].iter().enumerate() {
            pooled.push(tape.max_pool2d(chunks[i], *win, 1, win / 2).unwrap());
        }
        let cat = tape.concat_channels(&pooled).unwrap();
        let local = layer.lgm.depthwise.apply(&mut tape, &set, cat).unwrap();
        let expect = layer.lgm.reduce.apply(&mut tape, &set, local).unwrap();
        assert_eq!(tape.data(got), tape.data(expect));
    }

    #[test]
    fn fm_all_ones_next_with_identity_mlp_returns_lg() {
        let c = 2;
        let (mut set, layer) = layer_fixture(c, Some(c), Init::Zeros);
        // make the token MLP the identity (positive inputs pass the relu)
        for name in ["dec.l0.fm.mlp.fc1.weight", "dec.l0.fm.mlp.fc2.weight"] {
            let wv = &mut set.by_name_mut(name).unwrap().value;
            for j in 0..c {
                wv.data_mut()[j * c + j] = 1.0;
            }
        }
        let mut tape = Tape::<f64>::new();
        let lg_vals: Vec<f64> = (0..c * 9).map(|i| 0.1 + 0.01 * i as f64).collect();
        let lg = tape.constant(&Tensor::from_f64(vec![c, 3, 3], &lg_vals).unwrap());
        let ones = tape.constant(&Tensor::full(vec![c, 3, 3], 1.0));
        let out = fm(&mut tape, &set, &layer.fm, ones, lg).unwrap();
        for (o, e) in tape.data(out).to_vec().iter().zip(&lg_vals) {
            assert_relative_eq!(o, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn fm_zero_next_gives_mlp_bias_image() {
        let c = 2;
        let (mut set, layer) = layer_fixture(c, Some(c), Init::Zeros);
        set.by_name_mut("dec.l0.fm.mlp.fc2.bias").unwrap().value =
            Tensor::from_f64(vec![c], &[0.4, -0.2]).unwrap();
        let mut tape = Tape::<f64>::new();
        let lg = tape.constant(&Tensor::from_f64(vec![c, 3, 3], &pseudo(18, 0.2)).unwrap());
        let zeros = tape.constant(&Tensor::zeros(vec![c, 3, 3]));
        let out = fm(&mut tape, &set, &layer.fm, zeros, lg).unwrap();
        let d = tape.data(out);
        for i in 0..9 {
            assert_relative_eq!(d[i], 0.4);
            assert_relative_eq!(d[9 + i], -0.2);
        }
    }

    #[test]
    fn deepest_stand_in_broadcasts_the_mean() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(&Tensor::full(vec![3, 2, 2], 1.25));
        let s = deepest_stand_in(&mut tape, f).unwrap();
        assert_eq!(tape.shape(s), &[3, 2, 2]);
        assert!(tape.data(s).iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn head_zero_fixture_outputs_bias() {
        let (mut set, layer) = layer_fixture(4, None, Init::Zeros);
        set.by_name_mut("dec.l0.head.conv1.bias").unwrap().value = Tensor::scalar(-0.6);
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(&Tensor::from_f64(vec![4, 4, 4], &pseudo(64, 0.0)).unwrap());
        let p = head(&mut tape, &set, &layer.head, f).unwrap();
        assert_eq!(tape.shape(p), &[1, 4, 4]);
        assert!(tape.data(p).iter().all(|&v| v == -0.6));
    }

    #[test]
    fn head_translates_with_input() {
        // shifting the input one pixel right shifts interior logits with it
        let (set, layer) = layer_fixture(2, None, Init::KaimingUniform);
        let (h, w) = (6, 6);
        let base = pseudo(2 * h * w, 0.4);
        let mut shifted = vec![0.0; base.len()];
        for ch in 0..2 {
            for y in 0..h {
                for x in 1..w {
                    shifted[(ch * h + y) * w + x] = base[(ch * h + y) * w + x - 1];
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let f0 = tape.constant(&Tensor::from_f64(vec![2, h, w], &base).unwrap());
        let f1 = tape.constant(&Tensor::from_f64(vec![2, h, w], &shifted).unwrap());
        let p0 = head(&mut tape, &set, &layer.head, f0).unwrap();
        let p1 = head(&mut tape, &set, &layer.head, f1).unwrap();
        let (d0, d1) = (tape.data(p0).to_vec(), tape.data(p1));
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                assert_relative_eq!(d1[y * w + x], d0[y * w + x - 1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn msa_hard_zero_mask_annihilates() {
        let c = 4;
        let (set, layer) = layer_fixture(c, None, Init::KaimingUniform);
        let msa_p = layer.msa.as_ref().unwrap();
        let mut tape = Tape::<f64>::new();
        let fi = tape.constant(&Tensor::from_f64(vec![c, 3, 3], &pseudo(36, 0.1)).unwrap());
        let fd = tape.constant(&Tensor::from_f64(vec![c, 3, 3], &pseudo(36, 1.1)).unwrap());
        let f = tape.constant(&Tensor::from_f64(vec![c, 3, 3], &pseudo(36, 2.1)).unwrap());
        let zero_mask = tape.constant(&Tensor::zeros(vec![1, 3, 3]));
        let out = msa_with_mask(&mut tape, &set, msa_p, fi, fd, zero_mask, f).unwrap();
        for &v in tape.data(out) {
            assert!(v.abs() <= 1e-6, "refinement created mass outside the mask: {v}");
        }
    }

    #[test]
    fn msa_zero_feature_gives_zero_output() {
        let c = 2;
        let (set, layer) = layer_fixture(c, None, Init::KaimingUniform);
        let msa_p = layer.msa.as_ref().unwrap();
        let mut tape = Tape::<f64>::new();
        let fi = tape.constant(&Tensor::from_f64(vec![c, 2, 2], &pseudo(8, 0.3)).unwrap());
        let fd = tape.constant(&Tensor::from_f64(vec![c, 2, 2], &pseudo(8, 1.3)).unwrap());
        let f = tape.constant(&Tensor::zeros(vec![c, 2, 2]));
        let logits = tape.constant(&Tensor::from_f64(vec![1, 2, 2], &pseudo(4, 2.3)).unwrap());
        let out = msa(&mut tape, &set, msa_p, fi, fd, logits, f).unwrap();
        for &v in tape.data(out) {
            assert!(v.abs() <= 1e-12);
        }
    }

    #[test]
    fn msa_matches_dense_attention_oracle() {
        let c = 4;
        let (h, w) = (2, 3);
        let hw = h * w;
        let (set, layer) = layer_fixture(c, None, Init::KaimingUniform);
        let msa_p = layer.msa.as_ref().unwrap();
        let mut tape = Tape::<f64>::new();
        let fi = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(c * hw, 0.2)).unwrap());
        let fd = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(c * hw, 1.2)).unwrap());
        let f = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(c * hw, 2.2)).unwrap());
        let logits = tape.constant(&Tensor::from_f64(vec![1, h, w], &pseudo(hw, 3.2)).unwrap());
        let got = msa(&mut tape, &set, msa_p, fi, fd, logits, f).unwrap();

        // explicit-loop oracle over the c x c attention
        let mask = tape.sigmoid(logits).unwrap();
        let masked = tape.broadcast_mul(f, mask).unwrap();
        let qi = msa_p.q_rgb.apply(&mut tape, &set, fi).unwrap();
        let qd = msa_p.q_aux.apply(&mut tape, &set, fd).unwrap();
        let qcat = tape.concat_channels(&[qi, qd]).unwrap();
        let qmap = msa_p.q_merge.apply(&mut tape, &set, qcat).unwrap();
        let kmap = msa_p.key.apply(&mut tape, &set, masked).unwrap();
        let vmap = msa_p.value.apply(&mut tape, &set, masked).unwrap();
        let (qv, kv, vv, mkd) = (
            tape.data(qmap).to_vec(),
            tape.data(kmap).to_vec(),
            tape.data(vmap).to_vec(),
            tape.data(masked).to_vec(),
        );
        let mut scores = vec![0.0f64; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..hw {
                    acc += qv[i * hw + t] * kv[j * hw + t];
                }
                scores[i * c + j] = acc / (hw as f64).sqrt();
            }
        }
        let mut attn = vec![0.0f64; c * c];
        for i in 0..c {
            let mx = scores[i * c..(i + 1) * c].iter().cloned().fold(f64::MIN, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (scores[i * c + j] - mx).exp();
                attn[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                attn[i * c + j] /= sum;
            }
            let row_sum: f64 = attn[i * c..(i + 1) * c].iter().sum();
            assert_relative_eq!(row_sum, 1.0, epsilon = 1e-9);
        }
        for i in 0..c {
            for t in 0..hw {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += attn[i * c + j] * vv[j * hw + t];
                }
                let expect = acc + mkd[i * hw + t];
                assert_relative_eq!(tape.data(got)[i * hw + t], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn msa_cost_scales_quadratic_in_c_linear_in_hw() {
        let probe = |c: usize, h: usize, w: usize| -> u64 {
            let mut set = ParamSet::<f64>::new();
            let mut b = ParamBuilder::new(&mut set, Init::KaimingUniform, 5);
            let layer =
                build_decoder_layer(&mut b, "dec", c, None, &DecoderConfig::default()).unwrap();
            let msa_p = layer.msa.unwrap();
            let mut tape = Tape::<f64>::new();
            let n = c * h * w;
            let fi = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(n, 0.1)).unwrap());
            let fd = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(n, 1.1)).unwrap());
            let f = tape.constant(&Tensor::from_f64(vec![c, h, w], &pseudo(n, 2.1)).unwrap());
            let logits = tape.constant(&Tensor::from_f64(vec![1, h, w], &pseudo(h * w, 3.1)).unwrap());
            let before = tape.flops();
            msa(&mut tape, &set, &msa_p, fi, fd, logits, f).unwrap();
            tape.flops() - before
        };
        let base = probe(16, 8, 8);
        let double_hw = probe(16, 8, 16);
        let double_c = probe(32, 8, 8);
        let r_hw = double_hw as f64 / base as f64;
        let r_c = double_c as f64 / base as f64;
        assert!((1.7..=2.3).contains(&r_hw), "hw scaling {r_hw}");
        assert!((3.3..=4.7).contains(&r_c), "c scaling {r_c}");
    }

    #[test]
    fn multilevel_extent_ladder_and_reachability() {
        let channels = [4usize, 8, 12, 16];
        let mut set = ParamSet::<f64>::new();
        let mut b = ParamBuilder::new(&mut set, Init::KaimingUniform, 23);
        let ml = build_multilevel(&mut b, "ml", &channels).unwrap();
        let mut tape = Tape::<f64>::new();
        // refined features at strides 4/8/16/32 of a 64x64 input
        let extents = [(16usize, 16usize), (8, 8), (4, 4), (2, 2)];
        let mut refined = Vec::new();
        for (i, (h, w)) in extents.iter().enumerate() {
            let n = channels[i] * h * w;
            refined.push(tape.constant(&Tensor::from_f64(vec![channels[i], *h, *w], &pseudo(n, i as f64)).unwrap()));
        }
        let refined: [NodeId; 4] = [refined[0], refined[1], refined[2], refined[3]];
        let out = multilevel_aggregate(&mut tape, &set, &ml, &refined).unwrap();
        assert_eq!(tape.shape(out[0].0), &[1, 4, 4]);
        assert_eq!(tape.shape(out[1].0), &[1, 8, 8]);
        assert_eq!(tape.shape(out[2].0), &[1, 16, 16]);

        // gradient from the finest logits reaches every refined layer
        let loss = tape.sum_all(out[2].0).unwrap();
        tape.backward(loss).unwrap();
        for f in refined {
            let g = tape.grad(f).expect("gradient should reach every layer");
            assert!(g.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn multilevel_zero_refined_gives_head_biases() {
        let channels = [2usize, 3, 4, 5];
        let mut set = ParamSet::<f64>::new();
        let mut b = ParamBuilder::new(&mut set, Init::Zeros, 0);
        let ml = build_multilevel(&mut b, "ml", &channels).unwrap();
        set.by_name_mut("ml.low.head.conv1.bias").unwrap().value = Tensor::scalar(0.3);
        let mut tape = Tape::<f64>::new();
        let refined = [
            tape.constant(&Tensor::zeros(vec![2, 8, 8])),
            tape.constant(&Tensor::zeros(vec![3, 4, 4])),
            tape.constant(&Tensor::zeros(vec![4, 2, 2])),
            tape.constant(&Tensor::zeros(vec![5, 1, 1])),
        ];
        let out = multilevel_aggregate(&mut tape, &set, &ml, &refined).unwrap();
        assert!(tape.data(out[0].0).iter().all(|&v| v == 0.3));
        assert!(tape.data(out[1].0).iter().all(|&v| v == 0.0));
    }
}
