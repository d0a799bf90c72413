//! Named gradient-check cases covering every differentiable block. The
//! union of op kinds recorded by these cases must equal the tape's full op
//! list (`ALL_DIFFERENTIABLE_OPS`), so no backward path can silently go
//! unchecked. Selectors group cases per module for the CLI.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig};
use crate::error::{Result, XmsError};
use crate::fusion::{self, FusionConfig, MeanCombine, TcaMode, TsaMode};
use crate::gradcheck::grad_check;
use crate::losses::{self, DivergenceMode, LossConfig, LossInputs};
use crate::model::{Model, ModelConfig};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

type InputGen = Box<dyn Fn(u64) -> Vec<Tensor<f64>>>;
type Builder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

enum CaseKind {
    Graph { inputs: InputGen, build: Builder },
    EndToEnd,
}

pub struct GradCheckCase {
    pub name: &'static str,
    pub block: &'static str,
    pub tolerance: f64,
    kind: CaseKind,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub block: &'static str,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub ops: Vec<&'static str>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, lo, hi)).expect("shape consistent")
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Deterministic mask for loss cases: a centered box.
fn box_mask(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if (h / 4..3 * h / 4).contains(&y) && (w / 4..3 * w / 4).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn graph(
    name: &'static str,
    block: &'static str,
    inputs: impl Fn(u64) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + 'static,
) -> GradCheckCase {
    GradCheckCase {
        name,
        block,
        tolerance: BLOCK_TOLERANCE,
        kind: CaseKind::Graph { inputs: Box::new(inputs), build: Box::new(build) },
    }
}

/// Fusion-layer parameters with a fixed internal seed; gradients flow to
/// the case inputs through every parameterised op.
fn fusion_fixture(c: usize, cfg: &FusionConfig) -> (ParamSet<f64>, fusion::FusionLayerParams) {
    let mut set = ParamSet::new();
    let mut b = ParamBuilder::new(&mut set, Init::KaimingUniform, 83);
    let layer = fusion::build_fusion_layer(&mut b, "f", c, Some(c), cfg).expect("fixture builds");
    (set, layer)
}

fn decoder_fixture(c: usize) -> (ParamSet<f64>, decoder::DecoderLayerParams) {
    let mut set = ParamSet::new();
    let mut b = ParamBuilder::new(&mut set, Init::KaimingUniform, 29);
    let layer = decoder::build_decoder_layer(&mut b, "d", c, Some(c + 2), &DecoderConfig::default())
        .expect("fixture builds");
    (set, layer)
}

pub fn registry() -> Vec<GradCheckCase> {
    let mut cases = Vec::new();

    // tensor-core primitives
    cases.push(graph(
        "tensor-core/matmul",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 1);
            vec![tensor(&mut r, vec![3, 4], -1.0, 1.0), tensor(&mut r, vec![4, 2], -1.0, 1.0)]
        },
        |t, ids| {
            let m = t.matmul(ids[0], ids[1])?;
            let s = t.tanh(m)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/linear",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 2);
            vec![
                tensor(&mut r, vec![5, 3], -1.0, 1.0),
                tensor(&mut r, vec![3, 4], -1.0, 1.0),
                tensor(&mut r, vec![4], -0.5, 0.5),
            ]
        },
        |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            let s = t.sigmoid(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/conv2d",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 3);
            vec![
                tensor(&mut r, vec![4, 6, 6], -1.0, 1.0),
                tensor(&mut r, vec![4, 2, 3, 3], -0.8, 0.8),
                tensor(&mut r, vec![4], -0.3, 0.3),
            ]
        },
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1, 2)?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/max_pool2d",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 4);
            vec![tensor(&mut r, vec![2, 6, 6], -1.0, 1.0)]
        },
        |t, ids| {
            let y = t.max_pool2d(ids[0], 3, 1, 1)?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/avg_pool2d",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 5);
            vec![tensor(&mut r, vec![2, 6, 6], -1.0, 1.0)]
        },
        |t, ids| {
            let y = t.avg_pool2d(ids[0], 3, 2, 1)?;
            let s = t.sigmoid(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/global_pools",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 6);
            vec![tensor(&mut r, vec![3, 4, 4], -1.0, 1.0)]
        },
        |t, ids| {
            let a = t.global_avg_pool(ids[0])?;
            let m = t.global_max_pool(ids[0])?;
            let s = t.add(a, m)?;
            let n = t.channel_l2_norm(ids[0], 1e-8)?;
            let y = t.mul(s, n)?;
            t.sum_all(y)
        },
    ));
    cases.push(graph(
        "tensor-core/channel_reductions",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 7);
            vec![tensor(&mut r, vec![3, 4, 4], -1.0, 1.0)]
        },
        |t, ids| {
            let mx = t.channel_max(ids[0])?;
            let mn = t.channel_mean(ids[0])?;
            let y = t.mul(mx, mn)?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/bilinear_resize",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 8);
            vec![tensor(&mut r, vec![2, 4, 4], -1.0, 1.0)]
        },
        |t, ids| {
            let up = t.bilinear_resize(ids[0], 7, 9)?;
            let down = t.bilinear_resize(up, 3, 2)?;
            let s = t.tanh(down)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/structural",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 9);
            vec![tensor(&mut r, vec![2, 3, 3], -1.0, 1.0), tensor(&mut r, vec![2, 3, 3], -1.0, 1.0)]
        },
        |t, ids| {
            let cat = t.concat_channels(&[ids[0], ids[1]])?;
            let sh = t.channel_shuffle(cat, 2)?;
            let chunks = t.chunk_channels(sh, 2)?;
            let d = t.sub(chunks[0], chunks[1])?;
            let r = t.reshape(d, vec![2, 9])?;
            let tr = t.transpose2d(r)?;
            let s = t.tanh(tr)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/pointwise",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 10);
            vec![
                tensor(&mut r, vec![3, 4], -1.0, 1.0),
                tensor(&mut r, vec![3, 4], 1.0, 2.0),
                tensor(&mut r, vec![1], 0.3, 1.5),
            ]
        },
        |t, ids| {
            let a = t.sigmoid(ids[0])?;
            let b = t.tanh(ids[0])?;
            let c = t.relu(ids[0])?;
            let ab = t.add(a, b)?;
            let abc = t.mul(ab, c)?;
            let d = t.div(abc, ids[1])?;
            let e = t.affine(d, 0.7, 0.1)?;
            let f = t.scale(ids[2], e)?;
            let g = t.clamp(f, -0.75, 0.75)?;
            let sq = t.mul(ids[1], ids[1])?;
            let ln = t.ln(sq)?;
            let rt = t.sqrt(ids[1])?;
            let h = t.sub(ln, rt)?;
            let i = t.add(g, h)?;
            let sm = t.softmax(i, 1)?;
            let j = t.mul(sm, i)?;
            t.sum_all(j)
        },
    ));
    cases.push(graph(
        "tensor-core/broadcasts",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 11);
            vec![
                tensor(&mut r, vec![3, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![3, 1, 1], -1.0, 1.0),
                tensor(&mut r, vec![1, 4, 4], -1.0, 1.0),
            ]
        },
        |t, ids| {
            let a = t.broadcast_mul(ids[0], ids[1])?;
            let b = t.broadcast_add(a, ids[2])?;
            let c = t.broadcast_sub(b, ids[1])?;
            let s = t.tanh(c)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "tensor-core/cosine_similarity",
        "tensor-core",
        |seed| {
            let mut r = rng_for(seed, 12);
            vec![tensor(&mut r, vec![6], -1.0, 1.0), tensor(&mut r, vec![6], -1.0, 1.0)]
        },
        |t, ids| {
            let c = t.cosine_similarity(ids[0], ids[1])?;
            t.sum_all(c)
        },
    ));

    // fusion blocks (the 8 fusion-af rows)
    cases.push(graph(
        "fusion-af/decompose",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 20);
            vec![tensor(&mut r, vec![3, 4, 4], -1.0, 1.0)]
        },
        |t, ids| {
            let (m, v) = fusion::decompose(t, ids[0])?;
            let recon = t.broadcast_add(v, m)?;
            let s = t.tanh(recon)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "fusion-af/shared_mean",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 21);
            vec![tensor(&mut r, vec![4, 1, 1], -1.0, 1.0), tensor(&mut r, vec![4, 1, 1], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = fusion_fixture(4, &FusionConfig::default());
            let mlp = layer.shared_mlp.as_ref().unwrap();
            let ms = fusion::shared_mean(t, &set, mlp, MeanCombine::Outer, ids[0], ids[1])?;
            let s = t.tanh(ms)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "fusion-af/modal_proportion",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 22);
            vec![
                tensor(&mut r, vec![4, 1, 1], 0.1, 1.0),
                tensor(&mut r, vec![4, 1, 1], 0.1, 1.0),
                tensor(&mut r, vec![4, 1, 1], 0.1, 1.0),
            ]
        },
        |t, ids| fusion::modal_proportion(t, ids[0], ids[1], ids[2]),
    ));
    cases.push(graph(
        "fusion-af/tsa",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 23);
            vec![tensor(&mut r, vec![4, 5, 5], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = fusion_fixture(4, &FusionConfig::default());
            let d = fusion::tsa(t, &set, layer.tsa_rgb.as_ref().unwrap(), TsaMode::Full, ids[0])?;
            let s = t.tanh(d)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "fusion-af/cross_modal_spatial",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 24);
            vec![tensor(&mut r, vec![1, 5, 5], -1.0, 1.0), tensor(&mut r, vec![1, 5, 5], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = fusion_fixture(4, &FusionConfig::default());
            let (si, sd) =
                fusion::cross_modal_spatial(t, &set, layer.cc_spatial.as_ref().unwrap(), ids[0], ids[1])?;
            let p = t.mul(si, sd)?;
            t.sum_all(p)
        },
    ));
    cases.push(graph(
        "fusion-af/tca",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 25);
            vec![tensor(&mut r, vec![4, 5, 5], -1.0, 1.0)]
        },
        |t, ids| {
            let (mut set, layer) = fusion_fixture(4, &FusionConfig::default());
            // non-zero gate weight so the gct branch has live gradients
            set.by_name_mut("f.tca_rgb.gamma2").unwrap().value = Tensor::full(vec![4, 1, 1], 0.8);
            let d = fusion::tca(t, &set, layer.tca_rgb.as_ref().unwrap(), TcaMode::Full, ids[0])?;
            let s = t.tanh(d)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "fusion-af/cross_modal_channel",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 26);
            vec![tensor(&mut r, vec![4, 1, 1], -1.0, 1.0), tensor(&mut r, vec![4, 1, 1], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = fusion_fixture(4, &FusionConfig::default());
            let (ci, cd) =
                fusion::cross_modal_channel(t, &set, layer.csc_channel.as_ref().unwrap(), ids[0], ids[1])?;
            let p = t.mul(ci, cd)?;
            t.sum_all(p)
        },
    ));
    cases.push(graph(
        "fusion-af/fuse",
        "fusion-af",
        |seed| {
            let mut r = rng_for(seed, 27);
            vec![
                tensor(&mut r, vec![4, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![4, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![4, 8, 8], -1.0, 1.0),
            ]
        },
        |t, ids| {
            let (set, layer) = fusion_fixture(4, &FusionConfig::default());
            let (m_i, v_i) = fusion::decompose(t, ids[0])?;
            let (m_d, v_d) = fusion::decompose(t, ids[1])?;
            let mlp = layer.shared_mlp.as_ref().unwrap();
            let ms = fusion::shared_mean(t, &set, mlp, MeanCombine::Outer, m_i, m_d)?;
            let alpha = fusion::modal_proportion(t, ms, m_i, m_d)?;
            let ti = fusion::tsa(t, &set, layer.tsa_rgb.as_ref().unwrap(), TsaMode::Full, v_i)?;
            let td = fusion::tsa(t, &set, layer.tsa_aux.as_ref().unwrap(), TsaMode::Full, v_d)?;
            let spatial =
                fusion::cross_modal_spatial(t, &set, layer.cc_spatial.as_ref().unwrap(), ti, td)?;
            let ci = fusion::tca(t, &set, layer.tca_rgb.as_ref().unwrap(), TcaMode::Full, v_i)?;
            let cd = fusion::tca(t, &set, layer.tca_aux.as_ref().unwrap(), TcaMode::Full, v_d)?;
            let channel =
                fusion::cross_modal_channel(t, &set, layer.csc_channel.as_ref().unwrap(), ci, cd)?;
            let f_s = fusion::fuse(
                t,
                &set,
                &layer,
                ids[0],
                ids[1],
                Some(alpha),
                Some(spatial),
                Some(channel),
                Some(ids[2]),
            )?;
            let s = t.tanh(f_s)?;
            t.sum_all(s)
        },
    ));

    // decoder blocks
    cases.push(graph(
        "decoder-cfd/lgm",
        "decoder-cfd",
        |seed| {
            let mut r = rng_for(seed, 30);
            vec![tensor(&mut r, vec![4, 5, 5], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = decoder_fixture(4);
            let y = decoder::lgm(t, &set, &layer.lgm, ids[0])?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "decoder-cfd/fm",
        "decoder-cfd",
        |seed| {
            let mut r = rng_for(seed, 31);
            vec![tensor(&mut r, vec![6, 3, 3], -1.0, 1.0), tensor(&mut r, vec![4, 5, 5], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = decoder_fixture(4);
            let y = decoder::fm(t, &set, &layer.fm, ids[0], ids[1])?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "decoder-cfd/head",
        "decoder-cfd",
        |seed| {
            let mut r = rng_for(seed, 32);
            vec![tensor(&mut r, vec![4, 4, 4], -1.0, 1.0)]
        },
        |t, ids| {
            let (set, layer) = decoder_fixture(4);
            let p = decoder::head(t, &set, &layer.head, ids[0])?;
            let s = t.tanh(p)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "decoder-cfd/msa",
        "decoder-cfd",
        |seed| {
            let mut r = rng_for(seed, 33);
            vec![
                tensor(&mut r, vec![4, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![4, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![1, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![4, 4, 4], -1.0, 1.0),
            ]
        },
        |t, ids| {
            let (set, layer) = decoder_fixture(4);
            let msa_p = layer.msa.as_ref().unwrap();
            let y = decoder::msa(t, &set, msa_p, ids[0], ids[1], ids[2], ids[3])?;
            let s = t.tanh(y)?;
            t.sum_all(s)
        },
    ));
    cases.push(graph(
        "decoder-cfd/multilevel_aggregate",
        "decoder-cfd",
        |seed| {
            let mut r = rng_for(seed, 34);
            vec![
                tensor(&mut r, vec![4, 8, 8], -1.0, 1.0),
                tensor(&mut r, vec![6, 4, 4], -1.0, 1.0),
                tensor(&mut r, vec![8, 2, 2], -1.0, 1.0),
                tensor(&mut r, vec![10, 1, 1], -1.0, 1.0),
            ]
        },
        |t, ids| {
            let mut set = ParamSet::new();
            let mut b = ParamBuilder::new(&mut set, Init::KaimingUniform, 31);
            let ml = decoder::build_multilevel(&mut b, "ml", &[4, 6, 8, 10]).unwrap();
            let refined = [ids[0], ids[1], ids[2], ids[3]];
            let out = decoder::multilevel_aggregate(t, &set, &ml, &refined)?;
            let a = t.sum_all(out[0].0)?;
            let bb = t.sum_all(out[1].0)?;
            let c = t.sum_all(out[2].0)?;
            let ab = t.add(a, bb)?;
            t.add(ab, c)
        },
    ));

    // losses
    cases.push(graph(
        "losses/wbce_iou",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 40);
            vec![tensor(&mut r, vec![1, 8, 8], -2.0, 2.0)]
        },
        |t, ids| {
            let gt = Tensor::new(vec![1, 8, 8], box_mask(8, 8)).unwrap();
            let (b, i) = losses::wbce_iou(t, ids[0], &gt, &LossConfig::default())?;
            t.add(b, i)
        },
    ));
    cases.push(graph(
        "losses/multiscale",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 41);
            vec![
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 1, 1], -2.0, 2.0),
            ]
        },
        |t, ids| {
            let gt = Tensor::new(vec![1, 8, 8], box_mask(8, 8)).unwrap();
            let preds = [ids[0], ids[1], ids[2], ids[3]];
            losses::multiscale_loss(t, &preds, &gt, &LossConfig::default())
        },
    ));
    cases.push(graph(
        "losses/multilevel",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 42);
            vec![
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
            ]
        },
        |t, ids| {
            let gt = Tensor::new(vec![1, 8, 8], box_mask(8, 8)).unwrap();
            losses::multilevel_loss(t, ids[0], ids[1], ids[2], &gt, &LossConfig::default())
        },
    ));
    cases.push(graph(
        "losses/divergence_bernoulli",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 43);
            vec![
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
            ]
        },
        |t, ids| losses::divergence_loss(t, ids[0], ids[1], ids[2], DivergenceMode::Bernoulli),
    ));
    cases.push(graph(
        "losses/divergence_softmax",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 44);
            vec![
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
            ]
        },
        |t, ids| losses::divergence_loss(t, ids[0], ids[1], ids[2], DivergenceMode::SpatialSoftmax),
    ));
    cases.push(graph(
        "losses/total",
        "losses",
        |seed| {
            let mut r = rng_for(seed, 45);
            vec![
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 1, 1], -2.0, 2.0),
                tensor(&mut r, vec![1, 2, 2], -2.0, 2.0),
                tensor(&mut r, vec![1, 4, 4], -2.0, 2.0),
                tensor(&mut r, vec![1, 8, 8], -2.0, 2.0),
            ]
        },
        |t, ids| {
            let gt = Tensor::new(vec![1, 8, 8], box_mask(8, 8)).unwrap();
            let initial = [ids[0], ids[1], ids[2], ids[3]];
            let (total, _) = losses::total_loss(
                t,
                &LossInputs { initial: &initial, grouped: Some((ids[4], ids[5], ids[6])) },
                &gt,
                &LossConfig::default(),
            )?;
            Ok(total)
        },
    ));

    cases.push(GradCheckCase {
        name: "model/end_to_end",
        block: "model",
        tolerance: END_TO_END_TOLERANCE,
        kind: CaseKind::EndToEnd,
    });

    cases
}

pub fn selectors() -> Vec<&'static str> {
    vec!["all", "tensor-core", "fusion-af", "decoder-cfd", "losses", "model"]
}

/// Central-difference check of every model parameter on the full objective
/// at the given extent, sampling `max_coords` coordinates per parameter
/// tensor deterministically.
pub fn end_to_end_grad_check(
    cfg: &ModelConfig,
    extent: usize,
    seed: u64,
    eps: f64,
    max_coords: usize,
) -> Result<f64> {
    let mut model = Model::<f64>::new(cfg.clone(), Init::KaimingUniform, seed)?;
    let mut r = rng_for(seed, 99);
    let rgb = tensor(&mut r, vec![3, extent, extent], 0.0, 1.0);
    let aux = tensor(&mut r, vec![3, extent, extent], 0.0, 1.0);
    let gt = Tensor::new(vec![1, extent, extent], box_mask(extent, extent))?;

    let loss_of = |model: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &rgb, &aux)?;
        let (total, _) = model.loss(&mut tape, &out, &gt)?;
        Ok(tape.scalar_value(total)?)
    };

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &rgb, &aux)?;
    let (total, _) = model.loss(&mut tape, &out, &gt)?;
    tape.backward(total)?;
    model.params.zero_grads();
    tape.export_param_grads(&mut model.params);
    let analytic: Vec<Vec<f64>> = model.params.iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let mut coord_rng = rng_for(seed, 7);
    for idx in 0..model.params.len() {
        let n = model.params.get(idx).value.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| coord_rng.gen_range(0..n)).collect()
        };
        for coord in coords {
            let orig = model.params.get(idx).value.data()[coord];
            model.params.get_mut(idx).value.data_mut()[coord] = orig + eps;
            let plus = loss_of(&model)?;
            model.params.get_mut(idx).value.data_mut()[coord] = orig - eps;
            let minus = loss_of(&model)?;
            model.params.get_mut(idx).value.data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[idx][coord] - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Run one case; reports the worst relative error and the op kinds the
/// case's graph recorded.
pub fn run_case(case: &GradCheckCase, seed: u64, eps: f64) -> Result<CheckOutcome> {
    match &case.kind {
        CaseKind::Graph { inputs, build } => {
            let tensors = inputs(seed);
            // probe pass collects the recorded op kinds
            let mut probe = Tape::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| probe.constant(t)).collect();
            build(&mut probe, &ids)?;
            let ops = probe.recorded_op_names();
            let err = grad_check(|t, ids| build(t, ids), &tensors, eps)?;
            Ok(CheckOutcome {
                name: case.name,
                block: case.block,
                tolerance: case.tolerance,
                max_rel_err: err,
                passed: err < case.tolerance,
                ops,
            })
        }
        CaseKind::EndToEnd => {
            let cfg = ModelConfig::tiny();
            let err = end_to_end_grad_check(&cfg, 32, seed, eps, 6)?;
            Ok(CheckOutcome {
                name: case.name,
                block: case.block,
                tolerance: case.tolerance,
                max_rel_err: err,
                passed: err < case.tolerance,
                ops: vec![],
            })
        }
    }
}

/// Cases matching a selector ("all", a block name, or one case name).
pub fn select(selector: &str) -> Result<Vec<GradCheckCase>> {
    let cases = registry();
    if selector == "all" {
        return Ok(cases);
    }
    let filtered: Vec<GradCheckCase> = cases
        .into_iter()
        .filter(|c| c.block == selector || c.name == selector)
        .collect();
    if filtered.is_empty() {
        return Err(XmsError::Invalid(format!(
            "unknown gradcheck selector '{selector}'; known: {:?}",
            selectors()
        )));
    }
    Ok(filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ALL_DIFFERENTIABLE_OPS;
    use std::collections::BTreeSet;

    #[test]
    fn registry_covers_every_op_kind() {
        let mut seen = BTreeSet::new();
        for case in registry() {
            if let CaseKind::Graph { inputs, build } = &case.kind {
                let tensors = inputs(3);
                let mut probe = Tape::new();
                let ids: Vec<NodeId> = tensors.iter().map(|t| probe.constant(t)).collect();
                build(&mut probe, &ids).expect("case builds");
                seen.extend(probe.recorded_op_names());
            }
        }
        seen.remove("leaf");
        let want: BTreeSet<&str> = ALL_DIFFERENTIABLE_OPS.iter().copied().collect();
        let missing: Vec<_> = want.difference(&seen).collect();
        assert!(missing.is_empty(), "ops with no gradcheck coverage: {missing:?}");
    }

    #[test]
    fn fusion_selector_has_eight_rows() {
        let cases = select("fusion-af").unwrap();
        assert_eq!(cases.len(), 8);
    }

    #[test]
    fn unknown_selector_is_an_error() {
        assert!(select("nonsense").is_err());
    }

    #[test]
    fn every_block_case_passes_at_tolerance() {
        for case in registry() {
            if matches!(case.kind, CaseKind::EndToEnd) {
                continue; // exercised by the acceptance suite
            }
            let outcome = run_case(&case, 11, DEFAULT_EPS).expect("case runs");
            assert!(
                outcome.passed,
                "{} failed: max rel err {} >= {}",
                outcome.name, outcome.max_rel_err, outcome.tolerance
            );
        }
    }
}
