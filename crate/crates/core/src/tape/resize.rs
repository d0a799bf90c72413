//! Bilinear resampling (half-pixel centers, the align-corners=false
//! convention). Works in both directions, so it serves as upsampling in the
//! decoder and as the cross-layer resize in fusion.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::{lit, Scalar};

/// Source coordinate and lerp weights for one output index.
#[inline]
fn sample_axis(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let i0 = src.floor();
    let frac = src - i0;
    let i0c = (i0.max(0.0) as usize).min(in_len - 1);
    let i1c = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
    (i0c, i1c, frac.clamp(0.0, 1.0))
}

impl<T: Scalar> Tape<T> {
    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("bilinear_resize", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(XmsError::shape("bilinear_resize", "output extents must be >= 1"));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_axis(oy, h, out_h);
            let (wy0, wy1) = (lit::<T>(1.0 - fy), lit::<T>(fy));
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_axis(ox, w, out_w);
                let (wx0, wx1) = (lit::<T>(1.0 - fx), lit::<T>(fx));
                for ch in 0..c {
                    let base = ch * h * w;
                    let v = wy0 * (wx0 * xd[base + y0 * w + x0] + wx1 * xd[base + y0 * w + x1])
                        + wy1 * (wx0 * xd[base + y1 * w + x0] + wx1 * xd[base + y1 * w + x1]);
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        self.add_flops((c * out_h * out_w * 4) as u64);
        self.push(Node {
            op: Op::BilinearResize,
            inputs: vec![x],
            shape: vec![c, out_h, out_w],
            data: out,
            grad: None,
            param: None,
        })
    }
}

/// Transpose of the interpolation: scatter each output gradient back through
/// its four source weights.
pub(super) fn bilinear_backward<T: Scalar>(
    in_shape: &[usize],
    out_shape: &[usize],
    gout: &[T],
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut dx = vec![T::zero(); c * h * w];
    for oy in 0..oh {
        let (y0, y1, fy) = sample_axis(oy, h, oh);
        let (wy0, wy1) = (lit::<T>(1.0 - fy), lit::<T>(fy));
        for ox in 0..ow {
            let (x0, x1, fx) = sample_axis(ox, w, ow);
            let (wx0, wx1) = (lit::<T>(1.0 - fx), lit::<T>(fx));
            for ch in 0..c {
                let base = ch * h * w;
                let g = gout[(ch * oh + oy) * ow + ox];
                dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + g * wy0 * wx0;
                dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + g * wy0 * wx1;
                dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + g * wy1 * wx0;
                dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn same_extent_resize_is_identity() {
        let vals: Vec<f64> = (0..12).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![1, 3, 4], &vals).unwrap());
        let y = tape.bilinear_resize(x, 3, 4).unwrap();
        for (a, b) in tape.data(y).to_vec().iter().zip(&vals) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(vec![2, 2, 2], 3.25));
        let y = tape.bilinear_resize(x, 5, 7).unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn ramp_2x2_to_4x4_matches_hand_weights() {
        // per-pixel weight oracle: src = (o + 0.5)/2 - 0.5 along each axis,
        // so fractional offsets are 0 / 0.25 / 0.75 / 1 against the 2 samples
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = tape.bilinear_resize(x, 4, 4).unwrap();
        let row = |a: f64, b: f64| [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        let top = row(0.0, 1.0);
        let bot = row(2.0, 3.0);
        let mut expect = Vec::new();
        for wy in [1.0, 0.75, 0.25, 0.0] {
            for i in 0..4 {
                expect.push(wy * top[i] + (1.0 - wy) * bot[i]);
            }
        }
        for (got, want) in tape.data(y).to_vec().iter().zip(&expect) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_is_transpose_of_weights() {
        // sum(resize(x)) gradient equals, per input pixel, the total weight
        // with which it contributes; total mass is conserved
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![1, 2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap());
        let y = tape.bilinear_resize(x, 4, 4).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let total: f64 = g.data().iter().sum();
        assert_relative_eq!(total, 16.0, epsilon = 1e-9);
    }
}
