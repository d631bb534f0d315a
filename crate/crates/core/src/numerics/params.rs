use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Slot {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters with matching gradient accumulators.
///
/// Iteration order is the lexicographic name order; checkpoints and
/// digests rely on it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name:?}");
        }
        let grad = Some(Tensor::zeros(value.shape()));
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    /// Inserts a tensor drawn from `N(0, std²)`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Argument(format!("bad init std {std}: {e}")))?;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.slots.get(name) {
            Some(s) => Ok(&s.value),
            None => bail!(Argument, "unknown parameter {name:?}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.slots.get_mut(name) {
            Some(s) => Ok(&mut s.value),
            None => bail!(Argument, "unknown parameter {name:?}"),
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    /// Adds `factor · grad` into the accumulator for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor, factor: f64) -> Result<()> {
        let Some(slot) = self.slots.get_mut(name) else {
            bail!(Contract, "gradient for unknown parameter {name:?}");
        };
        if !slot.value.same_shape(grad) {
            bail!(
                Shape,
                "gradient shape {:?} for {name:?} expects {:?}",
                grad.shape(),
                slot.value.shape()
            );
        }
        let acc = slot
            .grad
            .get_or_insert_with(|| Tensor::zeros(slot.value.shape()));
        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            match &mut s.grad {
                Some(g) => g.fill(0.0),
                None => s.grad = Some(Tensor::zeros(s.value.shape())),
            }
        }
    }

    /// Removes a gradient accumulator; optimizer steps reject the store
    /// until a gradient is accumulated again.
    pub fn drop_grad(&mut self, name: &str) -> Option<Tensor> {
        self.slots.get_mut(name).and_then(|s| s.grad.take())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub(crate) fn slots_mut(&mut self) -> impl Iterator<Item = (&str, &mut Slot)> {
        self.slots.iter_mut().map(|(k, s)| (k.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.values().all(|s| s.value.is_finite())
    }
}
