//! Pooling and channel reductions. Padded positions never participate:
//! max pools take the max over valid elements, average pools divide by the
//! valid count, so constant inputs stay constant under any padding.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::{lit, Scalar};

use super::conv::out_extent;

fn pool_checks(
    op: &'static str,
    shape: &[usize],
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(XmsError::shape(op, format!("input rank {s:?}"))),
    };
    if window == 0 || stride == 0 {
        return Err(XmsError::shape(op, "window/stride must be positive"));
    }
    if window > h + 2 * padding || window > w + 2 * padding {
        return Err(XmsError::shape(
            op,
            format!("window {window} exceeds padded extent {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    if padding > window / 2 {
        return Err(XmsError::shape(
            op,
            format!("padding {padding} > window/2 leaves windows without valid input"),
        ));
    }
    let oh = out_extent(h, window, stride, padding);
    let ow = out_extent(w, window, stride, padding);
    Ok((c, h, w, oh, ow))
}

impl<T: Scalar> Tape<T> {
    /// Max pool; ties resolve to the first index in row-major scan order.
    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (c, h, w, oh, ow) = pool_checks("max_pool2d", self.shape(x), window, stride, padding)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.add_flops((c * oh * ow * window * window) as u64);
        self.push(Node {
            op: Op::MaxPool2d { argmax },
            inputs: vec![x],
            shape: vec![c, oh, ow],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Average pool over the valid (non-padded) elements of each window.
    pub fn avg_pool2d(
        &mut self,
        x: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (c, h, w, oh, ow) = pool_checks("avg_pool2d", self.shape(x), window, stride, padding)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    let mut count = 0usize;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + xd[base + iy as usize * w + ix as usize];
                            count += 1;
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc / lit::<T>(count as f64);
                }
            }
        }
        self.add_flops((c * oh * ow * window * window) as u64);
        self.push(Node {
            op: Op::AvgPool2d { window, stride, padding },
            inputs: vec![x],
            shape: vec![c, oh, ow],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Per-channel spatial mean: `[c,h,w] -> [c,1,1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("global_avg_pool", self.shape(x))?;
        let xd = self.data(x);
        let inv = lit::<T>(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for &v in &xd[ch * h * w..(ch + 1) * h * w] {
                acc = acc + v;
            }
            out[ch] = acc * inv;
        }
        self.add_flops((c * h * w) as u64);
        self.push(Node {
            op: Op::GlobalAvgPool,
            inputs: vec![x],
            shape: vec![c, 1, 1],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Per-channel spatial max: `[c,h,w] -> [c,1,1]`.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("global_max_pool", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let base = ch * h * w;
            let mut best = xd[base];
            let mut bi = base;
            for (i, &v) in xd[base..base + h * w].iter().enumerate() {
                if v > best {
                    best = v;
                    bi = base + i;
                }
            }
            out[ch] = best;
            argmax[ch] = bi;
        }
        self.push(Node {
            op: Op::GlobalMaxPool { argmax },
            inputs: vec![x],
            shape: vec![c, 1, 1],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Max across channels per pixel: `[c,h,w] -> [1,h,w]`. Ties keep the
    /// first channel.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("channel_max", self.shape(x))?;
        let xd = self.data(x);
        let hw = h * w;
        let mut out = vec![T::zero(); hw];
        let mut argmax = vec![0usize; hw];
        for i in 0..hw {
            let mut best = xd[i];
            let mut bi = i;
            for ch in 1..c {
                let v = xd[ch * hw + i];
                if v > best {
                    best = v;
                    bi = ch * hw + i;
                }
            }
            out[i] = best;
            argmax[i] = bi;
        }
        self.push(Node {
            op: Op::ChannelMax { argmax },
            inputs: vec![x],
            shape: vec![1, h, w],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Mean across channels per pixel: `[c,h,w] -> [1,h,w]`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("channel_mean", self.shape(x))?;
        let xd = self.data(x);
        let hw = h * w;
        let inv = lit::<T>(1.0 / c as f64);
        let mut out = vec![T::zero(); hw];
        for i in 0..hw {
            let mut acc = T::zero();
            for ch in 0..c {
                acc = acc + xd[ch * hw + i];
            }
            out[i] = acc * inv;
        }
        self.add_flops((c * hw) as u64);
        self.push(Node {
            op: Op::ChannelMean,
            inputs: vec![x],
            shape: vec![1, h, w],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Per-channel spatial l2 norm `sqrt(sum v^2 + eps)`: `[c,h,w] -> [c,1,1]`.
    pub fn channel_l2_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("channel_l2_norm", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = lit::<T>(eps);
            for &v in &xd[ch * h * w..(ch + 1) * h * w] {
                acc = acc + v * v;
            }
            out[ch] = acc.sqrt();
        }
        self.add_flops((c * h * w) as u64);
        self.push(Node {
            op: Op::ChannelL2Norm,
            inputs: vec![x],
            shape: vec![c, 1, 1],
            data: out,
            grad: None,
            param: None,
        })
    }
}

/// Route gradient to the recorded argmax positions.
pub(super) fn scatter_argmax<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    gout: &[T],
) -> Vec<T> {
    let n: usize = in_shape.iter().product();
    let mut dx = vec![T::zero(); n];
    for (&idx, &g) in argmax.iter().zip(gout) {
        dx[idx] = dx[idx] + g;
    }
    dx
}

pub(super) fn avg_pool_backward<T: Scalar>(
    window: usize,
    stride: usize,
    padding: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    gout: &[T],
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut valid = Vec::with_capacity(window * window);
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        valid.push(base + iy as usize * w + ix as usize);
                    }
                }
                let share = gout[(ch * oh + oy) * ow + ox] / lit::<T>(valid.len() as f64);
                for idx in valid {
                    dx[idx] = dx[idx] + share;
                }
            }
        }
    }
    dx
}

pub(super) fn global_avg_backward<T: Scalar>(in_shape: &[usize], gout: &[T]) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let inv = lit::<T>(1.0 / (h * w) as f64);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let share = gout[ch] * inv;
        for v in &mut dx[ch * h * w..(ch + 1) * h * w] {
            *v = share;
        }
    }
    dx
}

pub(super) fn channel_mean_backward<T: Scalar>(in_shape: &[usize], gout: &[T]) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let hw = h * w;
    let inv = lit::<T>(1.0 / c as f64);
    let mut dx = vec![T::zero(); c * hw];
    for ch in 0..c {
        for i in 0..hw {
            dx[ch * hw + i] = gout[i] * inv;
        }
    }
    dx
}

pub(super) fn channel_l2_backward<T: Scalar>(
    in_shape: &[usize],
    x: &[T],
    out: &[T],
    gout: &[T],
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let norm = out[ch];
        let g = gout[ch];
        for i in 0..h * w {
            let idx = ch * h * w + i;
            dx[idx] = g * x[idx] / norm;
        }
    }
    dx
}
