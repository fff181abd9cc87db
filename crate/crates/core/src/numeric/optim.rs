use std::collections::HashMap;

use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Applies one update from the gradient buffers of a store, then clears them.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParameterStore) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        for (name, p) in store.iter_mut() {
            let Some(g) = p.grad.take() else { continue };
            if p.frozen {
                return Err(Error::FrozenUpdate(name.to_string()));
            }
            for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let Some(g) = p.grad.take() else { continue };
            if p.frozen {
                return Err(Error::FrozenUpdate(name.to_string()));
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.0]), false);
        store.param_mut("w").unwrap().grad = Some(Tensor::vector(vec![2.0]));
        Sgd { lr: 0.25 }.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.5]);
        assert!(store.param("w").unwrap().grad.is_none());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![0.0, 0.0]), false);
        store.param_mut("w").unwrap().grad = Some(Tensor::vector(vec![3.0, -0.5]));
        Adam::new(0.1).step(&mut store).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_gradient_is_a_hard_error() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![0.0]), true);
        store.param_mut("w").unwrap().grad = Some(Tensor::vector(vec![1.0]));
        assert!(matches!(
            Adam::new(0.1).step(&mut store),
            Err(Error::FrozenUpdate(_))
        ));
    }
}
