//! Parameter-index bundles for the building blocks shared by the fusion and
//! decoder stages. The bundles hold registry indexes, not values, so the
//! architecture description stays independent of the element type.

use crate::error::Result;
use crate::params::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// A conv layer: weight (+ optional bias) indexes plus geometry.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let cin_g = c_in / groups;
        let fan_in = cin_g * k * k;
        let weight = b.weight(&format!("{name}.weight"), vec![c_out, cin_g, k, k], fan_in)?;
        let bias = if with_bias {
            Some(b.bias(&format!("{name}.bias"), c_out)?)
        } else {
            None
        };
        Ok(Conv2dParams { weight, bias, stride, padding, groups })
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.leaf_param(params, self.weight);
        let b = self.bias.map(|idx| tape.leaf_param(params, idx));
        tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    /// Closed-form scalar count for this layer geometry.
    pub fn count(c_out: usize, c_in: usize, k: usize, groups: usize, with_bias: bool) -> usize {
        c_out * (c_in / groups) * k * k + if with_bias { c_out } else { 0 }
    }
}

/// A dense layer applied to token rows: `x [n,in] -> [n,out]`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: usize,
    pub bias: usize,
}

impl LinearParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = b.weight(&format!("{name}.weight"), vec![d_in, d_out], d_in)?;
        let bias = b.bias(&format!("{name}.bias"), d_out)?;
        Ok(LinearParams { weight, bias })
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.leaf_param(params, self.weight);
        let b = tape.leaf_param(params, self.bias);
        tape.linear(x, w, b)
    }

    pub fn count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl MlpParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(MlpParams {
            l1: LinearParams::build(b, &format!("{name}.fc1"), d_in, hidden)?,
            l2: LinearParams::build(b, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.l1.apply(tape, params, x)?;
        let h = tape.relu(h)?;
        self.l2.apply(tape, params, h)
    }

    pub fn count(d_in: usize, hidden: usize, d_out: usize) -> usize {
        LinearParams::count(d_in, hidden) + LinearParams::count(hidden, d_out)
    }
}
