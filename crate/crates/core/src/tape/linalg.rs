//! Dense matrix ops and shape manipulation.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(XmsError::shape(
                "matmul",
                format!("inner dims disagree: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        self.add_flops((m * k * n) as u64);
        self.push(Node {
            op: Op::MatMul,
            inputs: vec![a, b],
            shape: vec![m, n],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Batched affine map over rows: `x [n,in] -> x*w + b` with `w [in,out]`,
    /// `b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, din) = rank2("linear", self.shape(x))?;
        let (din2, dout) = rank2("linear", self.shape(w))?;
        if din != din2 || self.shape(b) != [dout] {
            return Err(XmsError::shape(
                "linear",
                format!(
                    "x {:?}, w {:?}, b {:?} are inconsistent",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![T::zero(); n * dout];
        for i in 0..n {
            let orow = &mut out[i * dout..(i + 1) * dout];
            orow.copy_from_slice(bd);
            for kk in 0..din {
                let xv = xd[i * din + kk];
                let wrow = &wd[kk * dout..(kk + 1) * dout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
        self.add_flops((n * din * dout) as u64);
        self.push(Node {
            op: Op::Linear,
            inputs: vec![x, w, b],
            shape: vec![n, dout],
            data: out,
            grad: None,
            param: None,
        })
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = rank2("transpose2d", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push(Node {
            op: Op::Transpose2d,
            inputs: vec![x],
            shape: vec![c, r],
            data: out,
            grad: None,
            param: None,
        })
    }

    /// Reinterpret the (row-major) data under a new shape of equal volume.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vol: usize = shape.iter().product();
        if vol != self.data(x).len() {
            return Err(XmsError::shape(
                "reshape",
                format!("{:?} -> {:?} changes volume", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(Node {
            op: Op::Reshape,
            inputs: vec![x],
            shape,
            data,
            grad: None,
            param: None,
        })
    }

    /// `[c,h,w] -> [h*w, c]` token view (rows are pixels).
    pub fn to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("to_tokens", self.shape(x))?;
        let flat = self.reshape(x, vec![c, h * w])?;
        self.transpose2d(flat)
    }

    /// `[h*w, c] -> [c,h,w]`, inverse of `to_tokens`.
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (hw, c) = rank2("from_tokens", self.shape(x))?;
        if hw != h * w {
            return Err(XmsError::shape(
                "from_tokens",
                format!("token count {hw} != {h}x{w}"),
            ));
        }
        let t = self.transpose2d(x)?;
        self.reshape(t, vec![c, h, w])
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(XmsError::shape(op, format!("expected rank 2, got {shape:?}"))),
    }
}

pub(super) fn matmul_backward<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (m, k) = (a_shape[0], a_shape[1]);
    let n = b_shape[1];
    // dA = g . B^T
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..n {
            let g = gout[i * n + j];
            for kk in 0..k {
                da[i * k + kk] = da[i * k + kk] + g * b[kk * n + j];
            }
        }
    }
    // dB = A^T . g
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..n {
                db[kk * n + j] = db[kk * n + j] + av * gout[i * n + j];
            }
        }
    }
    vec![da, db]
}

pub(super) fn linear_backward<T: Scalar>(
    x_shape: &[usize],
    x: &[T],
    w_shape: &[usize],
    w: &[T],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (n, din) = (x_shape[0], x_shape[1]);
    let dout = w_shape[1];
    let mut dx = vec![T::zero(); n * din];
    let mut dw = vec![T::zero(); din * dout];
    let mut db = vec![T::zero(); dout];
    for i in 0..n {
        let grow = &gout[i * dout..(i + 1) * dout];
        for kk in 0..din {
            let mut acc = T::zero();
            let wrow = &w[kk * dout..(kk + 1) * dout];
            for (&g, &wv) in grow.iter().zip(wrow) {
                acc = acc + g * wv;
            }
            dx[i * din + kk] = acc;
            let xv = x[i * din + kk];
            let dwrow = &mut dw[kk * dout..(kk + 1) * dout];
            for (d, &g) in dwrow.iter_mut().zip(grow) {
                *d = *d + xv * g;
            }
        }
        for (d, &g) in db.iter_mut().zip(grow) {
            *d = *d + g;
        }
    }
    vec![dx, dw, db]
}

pub(super) fn transpose2d_backward<T: Scalar>(out_shape: &[usize], gout: &[T]) -> Vec<Vec<T>> {
    // output is [c,r]; gradient back to [r,c]
    let (c, r) = (out_shape[0], out_shape[1]);
    let mut dx = vec![T::zero(); gout.len()];
    for j in 0..c {
        for i in 0..r {
            dx[i * c + j] = gout[j * r + i];
        }
    }
    vec![dx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(&Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows_vanish() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64(vec![2, 1], &[0.0, 5.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[0.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // fixed pseudo-random values; oracle is an explicit triple loop
        let av: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let bv: Vec<f64> = (0..8).map(|i| ((i * 5 + 1) % 7) as f64 - 3.0).collect();
        let (m, k, n) = (3, 4, 2);
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    expect[i * n + j] += av[i * k + kk] * bv[kk * n + j];
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_f64(vec![m, k], &av).unwrap());
        let b = tape.constant(&Tensor::from_f64(vec![k, n], &bv).unwrap());
        let c = tape.matmul(a, b).unwrap();
        for (got, want) in tape.data(c).to_vec().iter().zip(&expect) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }

        // gradient against the same oracle: d sum(C) / dA[i,k] = sum_j B[k,j]
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        let da = tape.grad(a).unwrap();
        for i in 0..m {
            for kk in 0..k {
                let want: f64 = (0..n).map(|j| bv[kk * n + j]).sum();
                assert_relative_eq!(da.data()[i * k + kk], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn token_roundtrip_is_identity() {
        let vals: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![2, 3, 4], &vals).unwrap());
        let tokens = tape.to_tokens(x).unwrap();
        assert_eq!(tape.shape(tokens), &[12, 2]);
        let back = tape.from_tokens(tokens, 3, 4).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }
}
