//! Elementwise ops, broadcasts, reductions, and the fused loss kernels.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::{lit, Scalar};

/// Numerically stable logistic function.
#[inline]
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(XmsError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        op: Op<T>,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        self.same_shape(op.name(), a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.add_flops(data.len() as u64);
        let shape = self.shape(a).to_vec();
        self.push(Node {
            op,
            inputs: vec![a, b],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    fn unary_elementwise(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> Result<NodeId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        self.add_flops(data.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push(Node {
            op,
            inputs: vec![x],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Div, a, b, |x, y| x / y)
    }

    /// `a * x + b` with compile-time constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId> {
        let (ca, cb) = (lit::<T>(a), lit::<T>(b));
        self.unary_elementwise(Op::Affine { a }, x, |v| ca * v + cb)
    }

    /// Multiply a tensor by a `[1]`-shaped scalar node.
    pub fn scale(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        if self.shape(s) != [1] {
            return Err(XmsError::shape(
                "scale",
                format!("scale factor must be [1], got {:?}", self.shape(s)),
            ));
        }
        let sv = self.data(s)[0];
        let data: Vec<T> = self.data(t).iter().map(|&v| sv * v).collect();
        self.add_flops(data.len() as u64);
        let shape = self.shape(t).to_vec();
        self.push(Node {
            op: Op::Scale,
            inputs: vec![s, t],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_elementwise(Op::Sigmoid, x, stable_sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_elementwise(Op::Tanh, x, |v| v.tanh())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_elementwise(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_elementwise(Op::Sqrt, x, |v| v.sqrt())
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_elementwise(Op::Ln, x, |v| v.ln())
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (clo, chi) = (lit::<T>(lo), lit::<T>(hi));
        self.unary_elementwise(Op::Clamp { lo, hi }, x, |v| {
            if v < clo {
                clo
            } else if v > chi {
                chi
            } else {
                v
            }
        })
    }

    /// Broadcast multiply: `t [c,h,w]` times a `[c,1,1]` or `[1,h,w]` map.
    pub fn broadcast_mul(&mut self, t: NodeId, map: NodeId) -> Result<NodeId> {
        self.broadcast_op(Op::BMul, t, map, |x, m| x * m)
    }

    pub fn broadcast_add(&mut self, t: NodeId, map: NodeId) -> Result<NodeId> {
        self.broadcast_op(Op::BAdd, t, map, |x, m| x + m)
    }

    pub fn broadcast_sub(&mut self, t: NodeId, map: NodeId) -> Result<NodeId> {
        self.broadcast_op(Op::BSub, t, map, |x, m| x - m)
    }

    fn broadcast_op(
        &mut self,
        op: Op<T>,
        t: NodeId,
        map: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        let (c, h, w) = dims3(op.name(), self.shape(t))?;
        let kind = broadcast_kind(op.name(), self.shape(map), c, h, w)?;
        let td = self.data(t);
        let md = self.data(map);
        let mut data = vec![T::zero(); td.len()];
        match kind {
            BroadcastKind::Channel => {
                for ch in 0..c {
                    let m = md[ch];
                    let base = ch * h * w;
                    for i in 0..h * w {
                        data[base + i] = f(td[base + i], m);
                    }
                }
            }
            BroadcastKind::Spatial => {
                for ch in 0..c {
                    let base = ch * h * w;
                    for i in 0..h * w {
                        data[base + i] = f(td[base + i], md[i]);
                    }
                }
            }
        }
        self.add_flops(data.len() as u64);
        let shape = self.shape(t).to_vec();
        self.push(Node {
            op,
            inputs: vec![t, map],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    /// Row/column softmax of a rank-2 tensor, stabilised by max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(XmsError::shape(
                "softmax",
                format!("need rank-2 tensor and axis 0|1, got {shape:?} axis {axis}"),
            ));
        }
        let (r, cdim) = (shape[0], shape[1]);
        let xd = self.data(x).to_vec();
        let mut data = vec![T::zero(); xd.len()];
        let lanes = if axis == 1 { r } else { cdim };
        let lane_len = if axis == 1 { cdim } else { r };
        for lane in 0..lanes {
            let at = |i: usize| -> usize {
                if axis == 1 {
                    lane * cdim + i
                } else {
                    i * cdim + lane
                }
            };
            let mut mx = xd[at(0)];
            for i in 1..lane_len {
                mx = mx.max(xd[at(i)]);
            }
            let mut sum = T::zero();
            for i in 0..lane_len {
                let e = (xd[at(i)] - mx).exp();
                data[at(i)] = e;
                sum = sum + e;
            }
            for i in 0..lane_len {
                data[at(i)] = data[at(i)] / sum;
            }
        }
        self.add_flops(3 * xd.len() as u64);
        self.push(Node {
            op: Op::Softmax { axis },
            inputs: vec![x],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.data(x).iter().copied().sum();
        self.add_flops(self.data(x).len() as u64);
        self.push(Node {
            op: Op::SumAll,
            inputs: vec![x],
            shape: vec![1],
            data: vec![s],
            grad: None,
            param: None,
        })
    }

    /// Mean over all elements; sugar over `sum_all` + `affine`.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.data(x).len() as f64;
        let s = self.sum_all(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Cosine similarity of two equal-length tensors (flattened), with an
    /// epsilon-guarded denominator. Two zero vectors give exactly 0.
    pub fn cosine_similarity(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.same_shape("cosine_similarity", u, v)?;
        let eps = 1e-8;
        let ud = self.data(u);
        let vd = self.data(v);
        let mut dot = T::zero();
        let mut nu = T::zero();
        let mut nv = T::zero();
        for (&a, &b) in ud.iter().zip(vd) {
            dot = dot + a * b;
            nu = nu + a * a;
            nv = nv + b * b;
        }
        let denom = nu.sqrt() * nv.sqrt() + lit::<T>(eps);
        let out = dot / denom;
        self.add_flops(3 * ud.len() as u64);
        self.push(Node {
            op: Op::Cosine { eps },
            inputs: vec![u, v],
            shape: vec![1],
            data: vec![out],
            grad: None,
            param: None,
        })
    }

    /// Pixel-weighted binary cross-entropy on logits:
    /// `sum(w * bce(x, g)) / sum(w)`. `target` and `weights` are constants.
    pub fn weighted_bce(&mut self, logits: NodeId, target: &[T], weights: &[T]) -> Result<NodeId> {
        let xd = self.data(logits);
        if xd.len() != target.len() || xd.len() != weights.len() {
            return Err(XmsError::shape(
                "weighted_bce",
                format!(
                    "pred {} vs target {} vs weights {}",
                    xd.len(),
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let mut num = T::zero();
        let mut den = T::zero();
        for ((&x, &g), &w) in xd.iter().zip(target).zip(weights) {
            // max(x,0) - x*g + log(1 + e^{-|x|})
            let bce = x.max(T::zero()) - x * g + softplus(-x.abs());
            num = num + w * bce;
            den = den + w;
        }
        self.add_flops(4 * xd.len() as u64);
        self.push(Node {
            op: Op::WeightedBce {
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            inputs: vec![logits],
            shape: vec![1],
            data: vec![num / den],
            grad: None,
            param: None,
        })
    }

    /// Pixel-weighted soft IoU loss on logits:
    /// `1 - sum(w*p*g) / sum(w*(p + g - p*g))` with `p = sigmoid(x)`.
    /// When the union is empty (both maps empty) the loss is 0.
    pub fn weighted_iou(&mut self, logits: NodeId, target: &[T], weights: &[T]) -> Result<NodeId> {
        let xd = self.data(logits);
        if xd.len() != target.len() || xd.len() != weights.len() {
            return Err(XmsError::shape(
                "weighted_iou",
                format!(
                    "pred {} vs target {} vs weights {}",
                    xd.len(),
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let (inter, union) = iou_terms(xd, target, weights);
        let out = if union > T::zero() {
            T::one() - inter / union
        } else {
            T::zero()
        };
        self.add_flops(5 * xd.len() as u64);
        self.push(Node {
            op: Op::WeightedIou {
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            inputs: vec![logits],
            shape: vec![1],
            data: vec![out],
            grad: None,
            param: None,
        })
    }
}

fn iou_terms<T: Scalar>(logits: &[T], target: &[T], weights: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    for ((&x, &g), &w) in logits.iter().zip(target).zip(weights) {
        let p = stable_sigmoid(x);
        inter = inter + w * p * g;
        union = union + w * (p + g - p * g);
    }
    (inter, union)
}

pub(super) fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(XmsError::shape(op, format!("expected rank 3, got {shape:?}"))),
    }
}

enum BroadcastKind {
    Channel,
    Spatial,
}

fn broadcast_kind(
    op: &'static str,
    map_shape: &[usize],
    c: usize,
    h: usize,
    w: usize,
) -> Result<BroadcastKind> {
    match map_shape {
        [mc, 1, 1] if *mc == c => Ok(BroadcastKind::Channel),
        [1, mh, mw] if *mh == h && *mw == w => Ok(BroadcastKind::Spatial),
        _ => Err(XmsError::shape(
            op,
            format!("map {map_shape:?} does not broadcast against [{c}, {h}, {w}]"),
        )),
    }
}

pub(super) fn scale_backward<T: Scalar>(s: &[T], t: &[T], gout: &[T]) -> Vec<Vec<T>> {
    let sv = s[0];
    let ds: T = gout.iter().zip(t).map(|(&g, &x)| g * x).sum();
    let dt: Vec<T> = gout.iter().map(|&g| g * sv).collect();
    vec![vec![ds], dt]
}

pub(super) fn broadcast_backward<T: Scalar>(
    op: &Op<T>,
    t_shape: &[usize],
    t: &[T],
    map_shape: &[usize],
    map: &[T],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (c, h, w) = (t_shape[0], t_shape[1], t_shape[2]);
    let channel = matches!(map_shape, [mc, 1, 1] if *mc == c);
    let mut dt = vec![T::zero(); t.len()];
    let mut dmap = vec![T::zero(); map.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h * w {
            let g = gout[base + i];
            let mi = if channel { ch } else { i };
            match op {
                Op::BMul => {
                    dt[base + i] = g * map[mi];
                    dmap[mi] = dmap[mi] + g * t[base + i];
                }
                Op::BAdd => {
                    dt[base + i] = g;
                    dmap[mi] = dmap[mi] + g;
                }
                Op::BSub => {
                    dt[base + i] = g;
                    dmap[mi] = dmap[mi] - g;
                }
                _ => unreachable!("broadcast_backward on non-broadcast op"),
            }
        }
    }
    vec![dt, dmap]
}

pub(super) fn softmax_backward<T: Scalar>(
    axis: usize,
    shape: &[usize],
    y: &[T],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (r, cdim) = (shape[0], shape[1]);
    let mut dx = vec![T::zero(); y.len()];
    let lanes = if axis == 1 { r } else { cdim };
    let lane_len = if axis == 1 { cdim } else { r };
    for lane in 0..lanes {
        let at = |i: usize| -> usize {
            if axis == 1 {
                lane * cdim + i
            } else {
                i * cdim + lane
            }
        };
        let mut dot = T::zero();
        for i in 0..lane_len {
            dot = dot + gout[at(i)] * y[at(i)];
        }
        for i in 0..lane_len {
            dx[at(i)] = y[at(i)] * (gout[at(i)] - dot);
        }
    }
    vec![dx]
}

pub(super) fn cosine_backward<T: Scalar>(eps: f64, u: &[T], v: &[T], g: T) -> Vec<Vec<T>> {
    let mut dot = T::zero();
    let mut nu2 = T::zero();
    let mut nv2 = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        nu2 = nu2 + a * a;
        nv2 = nv2 + b * b;
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let denom = nu * nv + lit::<T>(eps);
    let denom2 = denom * denom;
    let mut du = vec![T::zero(); u.len()];
    let mut dv = vec![T::zero(); v.len()];
    for i in 0..u.len() {
        let mut d = v[i] / denom;
        if nu > T::zero() {
            d = d - dot * nv * u[i] / (nu * denom2);
        }
        du[i] = g * d;
        let mut d = u[i] / denom;
        if nv > T::zero() {
            d = d - dot * nu * v[i] / (nv * denom2);
        }
        dv[i] = g * d;
    }
    vec![du, dv]
}

pub(super) fn weighted_bce_backward<T: Scalar>(
    logits: &[T],
    target: &[T],
    weights: &[T],
    g: T,
) -> Vec<T> {
    let den: T = weights.iter().copied().sum();
    logits
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&x, &t), &w)| g * w * (stable_sigmoid(x) - t) / den)
        .collect()
}

pub(super) fn weighted_iou_backward<T: Scalar>(
    logits: &[T],
    target: &[T],
    weights: &[T],
    g: T,
) -> Vec<T> {
    let (inter, union) = iou_terms(logits, target, weights);
    if union <= T::zero() {
        return vec![T::zero(); logits.len()];
    }
    let u2 = union * union;
    logits
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&x, &t), &w)| {
            let p = stable_sigmoid(x);
            let dp = p * (T::one() - p);
            // d(1 - I/U)/dp = -(dI*U - I*dU)/U^2
            let di = w * t;
            let du = w * (T::one() - t);
            g * -(di * union - inter * du) / u2 * dp
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_relative_eq!(tape.data(y)[0], 0.5);
    }

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![1, 5], &[3.0; 5]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.data(y) {
            assert_relative_eq!(v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.3, -1.2, 2.5, 0.0, 4.1, -0.7];
        let x = tape.constant(&Tensor::from_f64(vec![2, 3], &vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 100.0).collect();
        let xs = tape.constant(&Tensor::from_f64(vec![2, 3], &shifted).unwrap());
        let ys = tape.softmax(xs, 1).unwrap();
        for row in 0..2 {
            let sum: f64 = tape.data(y)[row * 3..(row + 1) * 3].iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
        }
        for (a, b) in tape.data(y).to_vec().iter().zip(tape.data(ys)) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn saturating_softmax_stays_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(&Tensor::from_f64(vec![1, 3], &[1e30, -1e30, 0.0]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).all_finite());
        let s = tape.constant(&Tensor::from_f64(vec![2], &[1e30, -1e30]).unwrap());
        let sy = tape.sigmoid(s).unwrap();
        assert!(tape.value(sy).all_finite());
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap());
        let c = tape.cosine_similarity(u, u).unwrap();
        assert_relative_eq!(tape.data(c)[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let v = tape.constant(&Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap());
        let c = tape.cosine_similarity(u, v).unwrap();
        assert_relative_eq!(tape.data(c)[0], 0.0);
    }

    #[test]
    fn cosine_of_zero_vectors_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&Tensor::from_f64(vec![3], &[0.0; 3]).unwrap());
        let c = tape.cosine_similarity(z, z).unwrap();
        assert_eq!(tape.data(c)[0], 0.0);
        // gradient is defined (zero) rather than NaN
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(z).unwrap().all_finite());
    }

    #[test]
    fn cosine_matches_scalar_oracle() {
        let u = [0.4, -0.9, 1.7, 0.2];
        let v = [-1.1, 0.3, 0.8, 2.0];
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let expect = dot / (nu * nv + 1e-8);

        let mut tape = Tape::<f64>::new();
        let un = tape.constant(&Tensor::from_f64(vec![4], &u).unwrap());
        let vn = tape.constant(&Tensor::from_f64(vec![4], &v).unwrap());
        let c = tape.cosine_similarity(un, vn).unwrap();
        assert_relative_eq!(tape.data(c)[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn broadcast_shapes_are_validated() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(&Tensor::zeros(vec![2, 3, 3]));
        let bad = tape.constant(&Tensor::zeros(vec![3, 1, 1]));
        assert!(tape.broadcast_mul(t, bad).is_err());
        let chan = tape.constant(&Tensor::zeros(vec![2, 1, 1]));
        assert!(tape.broadcast_mul(t, chan).is_ok());
        let spat = tape.constant(&Tensor::zeros(vec![1, 3, 3]));
        assert!(tape.broadcast_mul(t, spat).is_ok());
    }
}
