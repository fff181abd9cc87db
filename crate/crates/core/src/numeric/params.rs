use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its freeze flag and gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

/// Tape handles for the parameters of one store, keyed by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) {
        self.params.insert(
            name.into(),
            Parameter {
                value,
                frozen,
                grad: None,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Sets the freeze flag of every parameter from `rule(name)`.
    pub fn apply_freeze_mask(&mut self, rule: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.frozen = rule(name);
        }
    }

    /// Records every parameter as a tape leaf; only unfrozen ones take gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), !p.frozen)))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds `weight · dLoss/dparam` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients, weight: f64) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let Some(var) = bound.vars.get(name) else {
                continue;
            };
            let Some(g) = grads.take(*var) else {
                continue;
            };
            if p.frozen {
                return Err(Error::FrozenUpdate(name.clone()));
            }
            match &mut p.grad {
                Some(buf) => buf
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(d, s)| *d += weight * s),
                None => {
                    let mut g = g;
                    g.data_mut().iter_mut().for_each(|v| *v *= weight);
                    p.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names, shapes, values and freeze flags of the selected parameters.
    pub fn digest_where(&self, select: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| select(p)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.frozen as u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }

    pub fn frozen_digest(&self) -> String {
        self.digest_where(|p| p.frozen)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_are_bound_as_constants() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]), false);
        store.insert("b", Tensor::vector(vec![3.0, 4.0]), true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (a, b) = (bound.var("a").unwrap(), bound.var("b").unwrap());
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        store.accumulate(&bound, &mut grads, 1.0).unwrap();
        assert_eq!(store.param("a").unwrap().grad.as_ref().unwrap().data(), &[3.0, 4.0]);
        assert!(store.param("b").unwrap().grad.is_none());
    }

    #[test]
    fn digest_tracks_values_and_flags() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.0]), true);
        let d0 = store.digest();
        store.param_mut("w").unwrap().frozen = false;
        assert_ne!(d0, store.digest());
        assert_eq!(store.frozen_digest(), ParameterStore::new().frozen_digest());
    }
}
