//! 2-D convolution (cross-correlation semantics) with stride, zero padding
//! and channel groups. Depthwise convolution is `groups = c_in`.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::Scalar;

pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

impl<T: Scalar> Tape<T> {
    /// `x [c_in,h,w]`, `weight [c_out, c_in/groups, k, k]`, optional bias
    /// `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let (cin, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(XmsError::shape("conv2d", format!("input rank {s:?}"))),
        };
        let (cout, cin_g, kh, kw) = match self.shape(weight) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(XmsError::shape("conv2d", format!("weight rank {s:?}"))),
        };
        if stride == 0 || groups == 0 {
            return Err(XmsError::shape("conv2d", "stride/groups must be positive"));
        }
        if kh != kw {
            return Err(XmsError::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if cin % groups != 0 || cout % groups != 0 {
            return Err(XmsError::shape(
                "conv2d",
                format!("channels c_in={cin} c_out={cout} not divisible by groups={groups}"),
            ));
        }
        if cin_g != cin / groups {
            return Err(XmsError::shape(
                "conv2d",
                format!("weight expects {cin_g} channels per group, input gives {}", cin / groups),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(XmsError::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(XmsError::shape(
                    "conv2d",
                    format!("bias {:?} vs c_out {cout}", self.shape(b)),
                ));
            }
        }
        let oh = out_extent(h, k, stride, padding);
        let ow = out_extent(w, k, stride, padding);
        let cout_g = cout / groups;

        let xd = self.data(x);
        let wd = self.data(weight);
        let bd: Option<&[T]> = bias.map(|b| self.data(b));
        let mut out = vec![T::zero(); cout * oh * ow];
        for co in 0..cout {
            let g = co / cout_g;
            let ci0 = g * cin_g;
            let bias_v = bd.map_or(T::zero(), |b| b[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_v;
                    for cil in 0..cin_g {
                        let xbase = (ci0 + cil) * h * w;
                        let wbase = ((co * cin_g) + cil) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + xd[xbase + iy as usize * w + ix as usize]
                                        * wd[wbase + ky * k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        self.add_flops((cout * oh * ow * cin_g * k * k) as u64);
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(Node {
            op: Op::Conv2d { stride, padding, groups },
            inputs,
            shape: vec![cout, oh, ow],
            data: out,
            grad: None,
            param: None,
        })
    }
}

pub(super) fn conv2d_backward<T: Scalar>(
    stride: usize,
    padding: usize,
    groups: usize,
    in_shapes: &[Vec<usize>],
    in_data: &[Vec<T>],
    out_shape: &[usize],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (cin, h, w) = (in_shapes[0][0], in_shapes[0][1], in_shapes[0][2]);
    let (cout, cin_g, k) = (in_shapes[1][0], in_shapes[1][1], in_shapes[1][2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let cout_g = cout / groups;
    let has_bias = in_shapes.len() == 3;
    let xd = &in_data[0];
    let wd = &in_data[1];

    let mut dx = vec![T::zero(); cin * h * w];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); cout];
    for co in 0..cout {
        let g = co / cout_g;
        let ci0 = g * cin_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gout[(co * oh + oy) * ow + ox];
                if has_bias {
                    db[co] = db[co] + go;
                }
                for cil in 0..cin_g {
                    let xbase = (ci0 + cil) * h * w;
                    let wbase = ((co * cin_g) + cil) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = xbase + iy as usize * w + ix as usize;
                            let wi = wbase + ky * k + kx;
                            dx[xi] = dx[xi] + wd[wi] * go;
                            dw[wi] = dw[wi] + xd[xi] * go;
                        }
                    }
                }
            }
        }
    }
    if has_bias {
        vec![dx, dw, db]
    } else {
        vec![dx, dw]
    }
}
