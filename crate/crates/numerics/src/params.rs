use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// Named parameter tensors. Names are unique and shapes never change after
/// insertion. Iteration order is the lexicographic name order, which keeps
/// every reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "ParameterStore::insert" });
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NumericsError::shape(
                "ParameterStore::set",
                format!("{:?}", slot.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    /// Frozen parameters are skipped by the optimizer.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for name in self.params.keys() {
            if name.starts_with(prefix) {
                self.frozen.insert(name.clone());
            }
        }
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|n| !n.starts_with(prefix));
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.frozen.contains(*n))
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(rows, cols))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulates `other` into `self`, summing entries present in both.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            g.scale_assign(k);
        }
    }

    /// L2 norm over all entries whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Fills in zero gradients for any trainable parameter without one.
    pub fn fill_missing(&mut self, store: &ParameterStore) {
        for (name, t) in store.iter() {
            if !self.grads.contains_key(name) {
                self.grads.insert(name.to_string(), Tensor::zeros(t.rows(), t.cols()));
            }
        }
    }
}
