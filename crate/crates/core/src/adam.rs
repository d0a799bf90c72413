//! Bias-corrected Adam with an optional step-decay learning-rate schedule
//! (rate divided by a fixed factor every N steps).

use serde::{Deserialize, Serialize};

use crate::error::{Result, XmsError};
use crate::params::ParamSet;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Divide the learning rate by `decay_factor` every this many steps.
    pub decay_interval: Option<u64>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_interval: None,
            decay_factor: 10.0,
        }
    }
}

pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        AdamState { cfg, step: 0, m, v }
    }

    /// Learning rate the *next* step will use.
    pub fn current_lr(&self) -> f64 {
        match self.cfg.decay_interval {
            Some(interval) if interval > 0 => {
                let drops = self.step / interval;
                self.cfg.lr / self.cfg.decay_factor.powi(drops as i32)
            }
            _ => self.cfg.lr,
        }
    }

    /// One update over all trainable parameters. Consumes the accumulated
    /// gradients and zeroes them.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for p in params.iter() {
            if p.trainable && !p.grad_touched() {
                return Err(XmsError::MissingGradient(p.name.clone()));
            }
        }
        let lr = lit::<T>(self.current_lr());
        self.step += 1;
        let b1 = lit::<T>(self.cfg.beta1);
        let b2 = lit::<T>(self.cfg.beta2);
        let eps = lit::<T>(self.cfg.eps);
        let one = T::one();
        let bc1 = one - lit::<T>(self.cfg.beta1.powi(self.step as i32));
        let bc2 = one - lit::<T>(self.cfg.beta2.powi(self.step as i32));
        for idx in 0..params.len() {
            if !params.get(idx).trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(idx);
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data_mut()[i] = p.value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }

    /// Raw moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(cfg: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        AdamState { cfg, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.register("w", Tensor::scalar(v)).unwrap();
        set
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = single_param(1.25);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        params.accumulate_grad(0, &[0.0]);
        state.step(&mut params).unwrap();
        assert_eq!(params.get(0).value.data()[0], 1.25);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with g=1, bias correction gives mhat/sqrt(vhat) = 1
        let mut params = single_param(0.0);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &params);
        params.accumulate_grad(0, &[1.0]);
        state.step(&mut params).unwrap();
        assert_relative_eq!(params.get(0).value.data()[0], -1e-3, epsilon = 1e-8);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = single_param(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(matches!(
            state.step(&mut params),
            Err(crate::error::XmsError::MissingGradient(_))
        ));
    }

    /// Independent scalar Adam simulation; the engine must match it exactly
    /// and the loss on a quadratic bowl must decrease steadily.
    #[test]
    fn quadratic_bowl_matches_scalar_simulation() {
        let target = 3.0f64;
        let lr = 0.05;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);

        // oracle
        let mut w_oracle = -1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut oracle_traj = Vec::new();
        for t in 1..=100u32 {
            let g = 2.0 * (w_oracle - target);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            w_oracle -= lr * mhat / (vhat.sqrt() + eps);
            oracle_traj.push(w_oracle);
        }

        // engine
        let mut params = single_param(-1.0);
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &params);
        let mut losses = Vec::new();
        for t in 0..100 {
            let w = params.get(0).value.data()[0];
            losses.push((w - target) * (w - target));
            params.accumulate_grad(0, &[2.0 * (w - target)]);
            state.step(&mut params).unwrap();
            assert_relative_eq!(params.get(0).value.data()[0], oracle_traj[t], epsilon = 1e-12);
        }
        for t in 5..99 {
            assert!(
                losses[t + 1] < losses[t],
                "loss rose at step {t}: {} -> {}",
                losses[t],
                losses[t + 1]
            );
        }
    }

    #[test]
    fn step_decay_divides_lr() {
        let params = single_param(0.0);
        let cfg = AdamConfig {
            lr: 1e-2,
            decay_interval: Some(10),
            decay_factor: 10.0,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &params);
        assert_relative_eq!(state.current_lr(), 1e-2);
        state.step = 10;
        assert_relative_eq!(state.current_lr(), 1e-3);
        state.step = 25;
        assert_relative_eq!(state.current_lr(), 1e-4);
    }
}
