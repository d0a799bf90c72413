//! Named parameter registry. Parameters are created once per model in a
//! deterministic order; tapes bind them as leaves and export gradients back
//! here, where they accumulate until the next optimizer step.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XmsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How fresh parameters get their values.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases.
    KaimingUniform,
    /// Everything zero. Test fixture.
    Zeros,
    /// Every weight the given value, biases zero. Test fixture.
    Constant(f64),
}

pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    grad_touched: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn grad_touched(&self) -> bool {
        self.grad_touched
    }
}

pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(XmsError::Invalid(format!("duplicate parameter name '{name}'")));
        }
        let idx = self.params.len();
        let n = value.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            value,
            grad: vec![T::zero(); n],
            trainable: true,
            grad_touched: false,
        });
        Ok(idx)
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        let idx = self.index_of(name)?;
        Some(&mut self.params[idx])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn accumulate_grad(&mut self, idx: usize, grad: &[T]) {
        let p = &mut self.params[idx];
        debug_assert_eq!(grad.len(), p.grad.len());
        for (g, &c) in p.grad.iter_mut().zip(grad) {
            *g = *g + c;
        }
        p.grad_touched = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = T::zero();
            }
            p.grad_touched = false;
        }
    }

    /// Scale accumulated gradients, e.g. by 1/batch before a step.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = crate::scalar::lit::<T>(factor);
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = *g * f;
            }
        }
    }
}

/// Creates parameters with deterministic seeded init and hierarchical names.
pub struct ParamBuilder<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
    init: Init,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, init: Init, seed: u64) -> Self {
        ParamBuilder {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
            init,
        }
    }

    fn weight_values(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        match self.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(v) => vec![crate::scalar::lit::<T>(v); n],
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n)
                    .map(|_| crate::scalar::lit::<T>(dist.sample(&mut self.rng)))
                    .collect()
            }
        }
    }

    pub fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = self.weight_values(n, fan_in);
        self.set.register(name, Tensor::new(shape, data)?)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<usize> {
        self.set.register(name, Tensor::zeros(vec![len]))
    }

    /// Scalar-per-channel parameter with an explicit initial value
    /// (gating/normalization coefficients).
    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<usize> {
        let n: usize = shape.iter().product();
        self.set
            .register(name, Tensor::new(shape, vec![crate::scalar::lit::<T>(value); n])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_must_be_unique() {
        let mut set = ParamSet::<f32>::new();
        set.register("w", Tensor::zeros(vec![2])).unwrap();
        assert!(set.register("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn kaiming_init_is_seed_deterministic() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        ParamBuilder::new(&mut a, Init::KaimingUniform, 42)
            .weight("w", vec![4, 4], 4)
            .unwrap();
        ParamBuilder::new(&mut b, Init::KaimingUniform, 42)
            .weight("w", vec![4, 4], 4)
            .unwrap();
        assert_eq!(a.get(0).value.data(), b.get(0).value.data());
    }

    #[test]
    fn grad_accumulates_across_exports() {
        let mut set = ParamSet::<f64>::new();
        let idx = set.register("w", Tensor::zeros(vec![2])).unwrap();
        set.accumulate_grad(idx, &[1.0, 2.0]);
        set.accumulate_grad(idx, &[0.5, 0.5]);
        assert_eq!(set.get(idx).grad, vec![1.5, 2.5]);
        assert!(set.get(idx).grad_touched());
        set.zero_grads();
        assert!(!set.get(idx).grad_touched());
    }
}
