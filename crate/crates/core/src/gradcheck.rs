//! Central-difference gradient checking. Runs in f64; compares the tape's
//! analytic gradients against `(f(x+eps) - f(x-eps)) / 2eps` coordinate by
//! coordinate and reports the worst relative error
//! `|analytic - numeric| / max(1, |numeric|)`.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XmsError};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Graph builder under test: binds the given leaves and returns a scalar
/// loss node.
pub trait LossFn: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>> LossFn for F {}

fn run_forward(
    f: &impl LossFn,
    inputs: &[Tensor<f64>],
) -> Result<(f64, Tape<f64>, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t)).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(XmsError::NonFinite("grad_check forward".into()));
    }
    Ok((v, tape, ids, loss))
}

fn loss_value(f: &impl LossFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    Ok(run_forward(f, inputs)?.0)
}

/// Check gradients of all coordinates of all inputs.
pub fn grad_check(f: impl LossFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    grad_check_inner(&f, inputs, eps, None, 0)
}

/// Check a deterministic random subset of coordinates per input tensor.
/// For large parameter sets where the full sweep is impractical.
pub fn grad_check_sampled(
    f: impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords_per_input: usize,
    seed: u64,
) -> Result<f64> {
    grad_check_inner(&f, inputs, eps, Some(max_coords_per_input), seed)
}

fn grad_check_inner(
    f: &impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let v1 = loss_value(f, inputs)?;
    let v2 = loss_value(f, inputs)?;
    if v1 != v2 {
        return Err(XmsError::Invalid(format!(
            "function is not deterministic: {v1} vs {v2}"
        )));
    }
    let (_, mut tape, ids2, loss) = run_forward(f, inputs)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(ids2[which])
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = match max_coords {
            Some(cap) if input.len() > cap => {
                let mut all: Vec<usize> = (0..input.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(cap);
                all
            }
            _ => (0..input.len()).collect(),
        };
        for coord in coords {
            let orig = perturbed[which].data()[coord];
            perturbed[which].data_mut()[coord] = orig + eps;
            let plus = loss_value(f, &perturbed)?;
            perturbed[which].data_mut()[coord] = orig - eps;
            let minus = loss_value(f, &perturbed)?;
            perturbed[which].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[coord] - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
