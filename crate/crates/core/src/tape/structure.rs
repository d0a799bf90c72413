//! Index permutations and partitions: concat, chunk, channel shuffle.
//! Forward is a pure reindexing; backward applies the inverse permutation.

use super::{Node, NodeId, Op, Tape};
use crate::error::{Result, XmsError};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(XmsError::shape("concat", "no inputs"));
        }
        let (_, h, w) = super::pointwise::dims3("concat", self.shape(parts[0]))?;
        let mut total_c = 0usize;
        for &p in parts {
            let (c, ph, pw) = super::pointwise::dims3("concat", self.shape(p))?;
            if ph != h || pw != w {
                return Err(XmsError::shape(
                    "concat",
                    format!("spatial extents differ: {}x{} vs {}x{}", ph, pw, h, w),
                ));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        self.push(Node {
            op: Op::Concat { axis: 0 },
            inputs: parts.to_vec(),
            shape: vec![total_c, h, w],
            data,
            grad: None,
            param: None,
        })
    }

    /// Split into `parts` equal chunks along the channel axis.
    pub fn chunk_channels(&mut self, x: NodeId, parts: usize) -> Result<Vec<NodeId>> {
        let (c, h, w) = super::pointwise::dims3("chunk", self.shape(x))?;
        if parts == 0 || c % parts != 0 {
            return Err(XmsError::shape(
                "chunk",
                format!("{c} channels not divisible into {parts} chunks"),
            ));
        }
        let cc = c / parts;
        let hw = h * w;
        let mut out = Vec::with_capacity(parts);
        for index in 0..parts {
            let data = self.data(x)[index * cc * hw..(index + 1) * cc * hw].to_vec();
            out.push(self.push(Node {
                op: Op::Chunk { parts, index },
                inputs: vec![x],
                shape: vec![cc, h, w],
                data,
                grad: None,
                param: None,
            })?);
        }
        Ok(out)
    }

    /// Interleave channel groups: with `g` groups of size `c/g`, input
    /// channel `group*size + j` moves to output channel `j*g + group`.
    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let (c, h, w) = super::pointwise::dims3("channel_shuffle", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(XmsError::shape(
                "channel_shuffle",
                format!("{c} channels not divisible by {groups} groups"),
            ));
        }
        let size = c / groups;
        let hw = h * w;
        let xd = self.data(x);
        let mut data = vec![T::zero(); xd.len()];
        for group in 0..groups {
            for j in 0..size {
                let src = (group * size + j) * hw;
                let dst = (j * groups + group) * hw;
                data[dst..dst + hw].copy_from_slice(&xd[src..src + hw]);
            }
        }
        self.push(Node {
            op: Op::ChannelShuffle { groups },
            inputs: vec![x],
            shape: vec![c, h, w],
            data,
            grad: None,
            param: None,
        })
    }
}

pub(super) fn concat_backward<T: Scalar>(
    _axis: usize,
    in_shapes: &[Vec<usize>],
    gout: &[T],
) -> Vec<Vec<T>> {
    let mut grads = Vec::with_capacity(in_shapes.len());
    let mut offset = 0usize;
    for s in in_shapes {
        let n: usize = s.iter().product();
        grads.push(gout[offset..offset + n].to_vec());
        offset += n;
    }
    grads
}

pub(super) fn chunk_backward<T: Scalar>(
    parts: usize,
    index: usize,
    in_shape: &[usize],
    gout: &[T],
) -> Vec<Vec<T>> {
    let n: usize = in_shape.iter().product();
    let len = n / parts;
    let mut dx = vec![T::zero(); n];
    dx[index * len..(index + 1) * len].copy_from_slice(gout);
    vec![dx]
}

pub(super) fn shuffle_backward<T: Scalar>(
    groups: usize,
    in_shape: &[usize],
    gout: &[T],
) -> Vec<Vec<T>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let size = c / groups;
    let hw = h * w;
    let mut dx = vec![T::zero(); gout.len()];
    for group in 0..groups {
        for j in 0..size {
            let src = (group * size + j) * hw;
            let dst = (j * groups + group) * hw;
            dx[src..src + hw].copy_from_slice(&gout[dst..dst + hw]);
        }
    }
    vec![dx]
}
