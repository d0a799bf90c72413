//! Training objective: boundary-weighted BCE plus soft IoU per prediction,
//! summed over the initial multi-scale maps and the grouped low/mid/high
//! maps, plus a symmetric KL term that ties neighbouring levels together.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XmsError};
use crate::scalar::{lit, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// Multi-scale weights for the four initial predictions.
    pub lambda: [f64; 4],
    /// Multi-level weights for mid and high (low is unweighted).
    pub beta1: f64,
    pub beta2: f64,
    /// Mix of the multi-level and divergence terms into the total.
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [1.0; 4],
            beta1: 1.0,
            beta2: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .lambda
            .iter()
            .chain([&self.beta1, &self.beta2, &self.gamma1, &self.gamma2]);
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(XmsError::Config(format!("loss weights must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distribution space for the cross-level KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Per-pixel Bernoulli distributions, KL averaged over pixels.
    #[default]
    Bernoulli,
    /// One softmax distribution over all pixels per map.
    SpatialSoftmax,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub divergence_mode: DivergenceMode,
    /// Boundary-weight pooling window at the reference extent; it rescales
    /// linearly with the prediction extent and is floored to an odd value.
    pub weight_window_base: usize,
    pub weight_window_ref_extent: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            divergence_mode: DivergenceMode::default(),
            weight_window_base: 15,
            weight_window_ref_extent: 64,
        }
    }
}

impl LossConfig {
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        let extent = h.min(w) as f64;
        let scaled =
            (self.weight_window_base as f64 * extent / self.weight_window_ref_extent as f64).round();
        let mut k = scaled as usize;
        if k == 0 {
            return 1;
        }
        if k % 2 == 0 {
            k -= 1;
        }
        k.max(1)
    }
}

/// Per-term summary of one total-loss evaluation. `wbce`/`iou` are the
/// weighted sums of their per-prediction parts, so
/// `total = wbce + iou + gamma2 * div = ms + gamma1 * ml + gamma2 * div`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub wbce: f64,
    pub iou: f64,
    pub ms: f64,
    pub ml: f64,
    pub div: f64,
    pub total: f64,
    /// (name, wbce, iou) per supervised prediction.
    pub per_term: Vec<(String, f64, f64)>,
}

fn check_binary<T: Scalar>(gt: &Tensor<T>) -> Result<()> {
    if gt.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(XmsError::Invalid("ground truth mask must be binary".into()));
    }
    Ok(())
}

/// Area-average the binary mask down to `h x w`, then re-binarize at 0.5.
pub fn downsample_binarize<T: Scalar>(gt: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, gh, gw) = gt.dims3()?;
    if c != 1 {
        return Err(XmsError::shape("downsample_gt", format!("want [1,H,W], got {:?}", gt.shape())));
    }
    if gh == h && gw == w {
        return Ok(gt.clone());
    }
    if gh % h != 0 || gw % w != 0 {
        return Err(XmsError::shape(
            "downsample_gt",
            format!("{gh}x{gw} does not divide into {h}x{w}"),
        ));
    }
    let (fy, fx) = (gh / h, gw / w);
    let inv = 1.0 / (fy * fx) as f64;
    let half = lit::<T>(0.5);
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for dy in 0..fy {
                for dx in 0..fx {
                    acc = acc + gt.data()[(y * fy + dy) * gw + (x * fx + dx)];
                }
            }
            let mean = acc * lit::<T>(inv);
            out[y * w + x] = if mean >= half { T::one() } else { T::zero() };
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Boundary-emphasis weights `1 + 5*|avgpool(gt, k) - gt|` on the (already
/// matched-extent) mask. Plain data, never on the tape.
pub fn boundary_weights<T: Scalar>(gt: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (_, h, w) = gt.dims3()?;
    if window <= 1 {
        return Ok(Tensor::full(vec![1, h, w], T::one()));
    }
    let pad = window / 2;
    let g = gt.data();
    let mut out = vec![T::zero(); h * w];
    let five = lit::<T>(5.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            let mut count = 0usize;
            for ky in 0..window {
                let iy = (y + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..window {
                    let ix = (x + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc = acc + g[iy as usize * w + ix as usize];
                    count += 1;
                }
            }
            let avg = acc / lit::<T>(count as f64);
            out[y * w + x] = T::one() + five * (avg - g[y * w + x]).abs();
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Weighted BCE + weighted soft IoU of one logit map against the full-res
/// mask (downsampled here as needed). Returns (wbce, iou) scalar nodes.
pub fn wbce_iou<T: Scalar>(
    tape: &mut Tape<T>,
    pred_logits: NodeId,
    gt_full: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId)> {
    check_binary(gt_full)?;
    let (c, h, w) = match tape.shape(pred_logits) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(XmsError::shape("wbce_iou", format!("pred rank {s:?}"))),
    };
    if c != 1 {
        return Err(XmsError::shape("wbce_iou", format!("pred must be [1,h,w], got {c} channels")));
    }
    let gt = downsample_binarize(gt_full, h, w)?;
    let weights = boundary_weights(&gt, cfg.window_for(h, w))?;
    let bce = tape.weighted_bce(pred_logits, gt.data(), weights.data())?;
    let iou = tape.weighted_iou(pred_logits, gt.data(), weights.data())?;
    Ok((bce, iou))
}

struct TermAccumulator<T> {
    nodes: Vec<NodeId>,
    wbce_sum: f64,
    iou_sum: f64,
    per_term: Vec<(String, f64, f64)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> TermAccumulator<T> {
    fn new() -> Self {
        TermAccumulator {
            nodes: Vec::new(),
            wbce_sum: 0.0,
            iou_sum: 0.0,
            per_term: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(
        &mut self,
        tape: &mut Tape<T>,
        name: &str,
        pred: NodeId,
        gt: &Tensor<T>,
        cfg: &LossConfig,
        weight: f64,
    ) -> Result<()> {
        let (bce, iou) = wbce_iou(tape, pred, gt, cfg)?;
        let bce_v = tape.scalar_value(bce)?.to_f64();
        let iou_v = tape.scalar_value(iou)?.to_f64();
        self.per_term.push((name.to_string(), bce_v, iou_v));
        self.wbce_sum += weight * bce_v;
        self.iou_sum += weight * iou_v;
        if weight != 0.0 {
            let term = tape.add(bce, iou)?;
            let scaled = if weight == 1.0 {
                term
            } else {
                tape.affine(term, weight, 0.0)?
            };
            self.nodes.push(scaled);
        }
        Ok(())
    }

    fn total(&self, tape: &mut Tape<T>) -> Result<NodeId> {
        match self.nodes.split_first() {
            None => Ok(tape.constant_scalar(T::zero())),
            Some((&first, rest)) => {
                let mut acc = first;
                for &n in rest {
                    acc = tape.add(acc, n)?;
                }
                Ok(acc)
            }
        }
    }
}

/// Multi-scale loss over the four initial predictions.
pub fn multiscale_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[NodeId; 4],
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let mut acc = TermAccumulator::new();
    for (i, &p) in preds.iter().enumerate() {
        acc.push(tape, &format!("p{}", i + 1), p, gt, cfg, cfg.weights.lambda[i])?;
    }
    acc.total(tape)
}

/// Multi-level loss over the grouped low/mid/high predictions.
pub fn multilevel_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_low: NodeId,
    p_mid: NodeId,
    p_high: NodeId,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let mut acc = TermAccumulator::new();
    acc.push(tape, "low", p_low, gt, cfg, 1.0)?;
    acc.push(tape, "mid", p_mid, gt, cfg, cfg.weights.beta1)?;
    acc.push(tape, "high", p_high, gt, cfg, cfg.weights.beta2)?;
    acc.total(tape)
}

fn align_pair<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (ha, wa) = (tape.shape(a)[1], tape.shape(a)[2]);
    let (hb, wb) = (tape.shape(b)[1], tape.shape(b)[2]);
    if ha * wa >= hb * wb {
        let b_up = tape.bilinear_resize(b, ha, wa)?;
        Ok((a, b_up))
    } else {
        let a_up = tape.bilinear_resize(a, hb, wb)?;
        Ok((a_up, b))
    }
}

/// Symmetric KL between two probability maps (same extents, clamped).
fn symmetric_kl<T: Scalar>(
    tape: &mut Tape<T>,
    qa: NodeId,
    qb: NodeId,
    mode: DivergenceMode,
) -> Result<NodeId> {
    let one_sided = |tape: &mut Tape<T>, p: NodeId, q: NodeId| -> Result<NodeId> {
        // KL(p || q) in the chosen distribution space
        let ln_p = tape.ln(p)?;
        let ln_q = tape.ln(q)?;
        let diff = tape.sub(ln_p, ln_q)?;
        let first = tape.mul(p, diff)?;
        match mode {
            DivergenceMode::SpatialSoftmax => tape.sum_all(first),
            DivergenceMode::Bernoulli => {
                let p1 = tape.affine(p, -1.0, 1.0)?;
                let q1 = tape.affine(q, -1.0, 1.0)?;
                let ln_p1 = tape.ln(p1)?;
                let ln_q1 = tape.ln(q1)?;
                let diff1 = tape.sub(ln_p1, ln_q1)?;
                let second = tape.mul(p1, diff1)?;
                let total = tape.add(first, second)?;
                tape.mean_all(total)
            }
        }
    };
    let ab = one_sided(tape, qa, qb)?;
    let ba = one_sided(tape, qb, qa)?;
    tape.add(ab, ba)
}

fn to_prob<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, mode: DivergenceMode) -> Result<NodeId> {
    match mode {
        DivergenceMode::Bernoulli => {
            let s = tape.sigmoid(logits)?;
            tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
        }
        DivergenceMode::SpatialSoftmax => {
            let n = tape.data(logits).len();
            let flat = tape.reshape(logits, vec![1, n])?;
            let sm = tape.softmax(flat, 1)?;
            tape.clamp(sm, PROB_EPS, 1.0)
        }
    }
}

/// Cross-level consistency: symmetric KL of the (low, mid) and (mid, high)
/// pairs after bilinear alignment of logits to the finer extents.
pub fn divergence_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_low: NodeId,
    p_mid: NodeId,
    p_high: NodeId,
    mode: DivergenceMode,
) -> Result<NodeId> {
    let mut pair = |tape: &mut Tape<T>, x: NodeId, y: NodeId| -> Result<NodeId> {
        let (xa, ya) = align_pair(tape, x, y)?;
        let qx = to_prob(tape, xa, mode)?;
        let qy = to_prob(tape, ya, mode)?;
        symmetric_kl(tape, qx, qy, mode)
    };
    let lm = pair(tape, p_low, p_mid)?;
    let mh = pair(tape, p_mid, p_high)?;
    tape.add(lm, mh)
}

/// Everything a forward pass must supply to the objective.
pub struct LossInputs<'a> {
    pub initial: &'a [NodeId; 4],
    pub grouped: Option<(NodeId, NodeId, NodeId)>,
}

/// Total objective `ms + gamma1 * ml + gamma2 * div`, plus the per-term
/// report. Without grouped outputs the ml and div terms are zero.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &LossInputs<'_>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(NodeId, LossReport)> {
    cfg.weights.validate()?;
    let mut per_term = Vec::new();

    let mut ms_acc = TermAccumulator::new();
    for (i, &p) in inputs.initial.iter().enumerate() {
        ms_acc.push(tape, &format!("p{}", i + 1), p, gt, cfg, cfg.weights.lambda[i])?;
    }
    let ms = ms_acc.total(tape)?;
    let ms_v = tape.scalar_value(ms)?.to_f64();
    per_term.extend(ms_acc.per_term.iter().cloned());
    let mut wbce = ms_acc.wbce_sum;
    let mut iou = ms_acc.iou_sum;

    let (ml_v, div_v, total) = match inputs.grouped {
        Some((low, mid, high)) => {
            let mut ml_acc = TermAccumulator::new();
            ml_acc.push(tape, "low", low, gt, cfg, 1.0)?;
            ml_acc.push(tape, "mid", mid, gt, cfg, cfg.weights.beta1)?;
            ml_acc.push(tape, "high", high, gt, cfg, cfg.weights.beta2)?;
            let ml = ml_acc.total(tape)?;
            let ml_v = tape.scalar_value(ml)?.to_f64();
            per_term.extend(ml_acc.per_term.iter().cloned());
            wbce += cfg.weights.gamma1 * ml_acc.wbce_sum;
            iou += cfg.weights.gamma1 * ml_acc.iou_sum;

            let div = divergence_loss(tape, low, mid, high, cfg.divergence_mode)?;
            let div_v = tape.scalar_value(div)?.to_f64();

            let ml_w = tape.affine(ml, cfg.weights.gamma1, 0.0)?;
            let div_w = tape.affine(div, cfg.weights.gamma2, 0.0)?;
            let t = tape.add(ms, ml_w)?;
            let t = tape.add(t, div_w)?;
            (ml_v, div_v, t)
        }
        None => (0.0, 0.0, ms),
    };

    let total_v = tape.scalar_value(total)?.to_f64();
    Ok((
        total,
        LossReport {
            wbce,
            iou,
            ms: ms_v,
            ml: ml_v,
            div: div_v,
            total: total_v,
            per_term,
        },
    ))
}
