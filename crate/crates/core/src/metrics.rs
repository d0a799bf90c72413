//! Saliency evaluation metrics: mean absolute error, max F-measure over a
//! 255-threshold sweep, structure measure (object + region similarity), and
//! the enhanced-alignment measure. Predictions are [0,1] maps, masks are
//! binary; every metric lands in [0,1].

use crate::error::{Result, XmsError};

const EPS: f64 = 1e-20;
const FBETA2: f64 = 0.3;

fn validate(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(XmsError::shape(
            "metrics",
            format!("pred {} vs gt {}", pred.len(), gt.len()),
        ));
    }
    if pred.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(XmsError::Invalid("prediction values must lie in [0,1]".into()));
    }
    if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(XmsError::Invalid("ground truth must be binary".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    validate(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Max F-measure over thresholds i/255 (strict `>`), beta^2 = 0.3.
pub fn max_f_measure(pred: &[f64], gt: &[f64]) -> Result<f64> {
    validate(pred, gt)?;
    let total_pos: f64 = gt.iter().sum();
    let mut best = 0.0f64;
    for i in 0..255 {
        let tau = i as f64 / 255.0;
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (&p, &g) in pred.iter().zip(gt) {
            if p > tau {
                if g > 0.5 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if total_pos > 0.0 { tp / total_pos } else { 0.0 };
        let denom = FBETA2 * precision + recall;
        let f = if denom > 0.0 {
            (1.0 + FBETA2) * precision * recall / denom
        } else {
            0.0
        };
        best = best.max(f);
    }
    Ok(best)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn object_score(pred_region: &[f64]) -> f64 {
    if pred_region.is_empty() {
        return 0.0;
    }
    let x = mean(pred_region);
    let n = pred_region.len() as f64;
    let sigma = (pred_region.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / n).sqrt();
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn ssim_block(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let (mx, my) = (mean(pred), mean(gt));
    let denom_n = if n > 1.0 { n - 1.0 } else { 1.0 };
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        sx += (p - mx) * (p - mx);
        sy += (g - my) * (g - my);
        sxy += (p - mx) * (g - my);
    }
    sx /= denom_n;
    sy /= denom_n;
    sxy /= denom_n;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_blocks(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    // centroid of the mask (image center when empty), blocks include the
    // centroid row/column in the top-left quadrant
    let total: f64 = gt.iter().sum();
    let (cx, cy) = if total == 0.0 {
        (w / 2, h / 2)
    } else {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                if gt[y * w + x] > 0.5 {
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        ((sx / total).round() as usize, (sy / total).round() as usize)
    };
    let split_x = (cx + 1).min(w);
    let split_y = (cy + 1).min(h);
    let ranges = [
        (0..split_y, 0..split_x),
        (0..split_y, split_x..w),
        (split_y..h, 0..split_x),
        (split_y..h, split_x..w),
    ];
    let mut score = 0.0;
    for (ys, xs) in ranges {
        let mut bp = Vec::new();
        let mut bg = Vec::new();
        for y in ys.clone() {
            for x in xs.clone() {
                bp.push(pred[y * w + x]);
                bg.push(gt[y * w + x]);
            }
        }
        let weight = bp.len() as f64 / (h * w) as f64;
        if !bp.is_empty() {
            score += weight * ssim_block(&bp, &bg);
        }
    }
    score
}

/// Structure measure: 0.5 * object similarity + 0.5 * region similarity,
/// with the usual degenerate branches for empty/full masks.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    validate(pred, gt)?;
    if pred.len() != h * w {
        return Err(XmsError::shape("s_measure", format!("{h}x{w} vs {}", pred.len())));
    }
    let y = mean(gt);
    let s = if y == 0.0 {
        1.0 - mean(pred)
    } else if y == 1.0 {
        mean(pred)
    } else {
        let fg_pred: Vec<f64> = pred
            .iter()
            .zip(gt)
            .filter(|(_, &g)| g > 0.5)
            .map(|(&p, _)| p)
            .collect();
        let bg_pred: Vec<f64> = pred
            .iter()
            .zip(gt)
            .filter(|(_, &g)| g <= 0.5)
            .map(|(&p, _)| 1.0 - p)
            .collect();
        let object = y * object_score(&fg_pred) + (1.0 - y) * object_score(&bg_pred);
        let region = region_blocks(pred, gt, h, w);
        0.5 * object + 0.5 * region
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Enhanced-alignment measure via mean-centered correlation, normalised by
/// the pixel count so a perfect prediction scores exactly 1.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> Result<f64> {
    validate(pred, gt)?;
    let n = pred.len() as f64;
    let gt_sum: f64 = gt.iter().sum();
    let enhanced_sum: f64 = if gt_sum == 0.0 {
        pred.iter().map(|p| 1.0 - p).sum()
    } else if gt_sum == n {
        pred.iter().sum()
    } else {
        let mp = mean(pred);
        let mg = mean(gt);
        pred.iter()
            .zip(gt)
            .map(|(&p, &g)| {
                let (dp, dg) = (p - mp, g - mg);
                let align = 2.0 * dp * dg / (dp * dp + dg * dg + EPS);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    Ok((enhanced_sum / n).clamp(0.0, 1.0))
}

/// All four metrics of one prediction map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub mae: f64,
    pub fmax: f64,
    pub smeasure: f64,
    pub emeasure: f64,
}

pub fn evaluate(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<MetricValues> {
    Ok(MetricValues {
        mae: mae(pred, gt)?,
        fmax: max_f_measure(pred, gt)?,
        smeasure: s_measure(pred, gt, h, w)?,
        emeasure: e_measure(pred, gt)?,
    })
}
