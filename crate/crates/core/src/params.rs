//! Named trainable tensors with a frozen flag each.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Parameters keyed by dotted path (`encoder.blocks.0.attn.qkv.weight`),
/// iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: BTreeMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(config_err(format!("duplicate parameter {name:?}")));
        }
        self.params.insert(name, Param { value, frozen: false });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| config_err(format!("unknown parameter {name:?}")))
    }

    /// Replaces a value, keeping the frozen flag. The shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| config_err(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(config_err(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Scalar count over all tensors.
    pub fn num_elements(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }

    pub fn num_frozen(&self) -> u64 {
        self.params.values().filter(|p| p.frozen).map(|p| p.value.len() as u64).sum()
    }

    pub fn num_learnable(&self) -> u64 {
        self.num_elements() - self.num_frozen()
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
    }

    /// Deep copy of the frozen tensors, for bitwise before/after checks.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Names whose current value differs bitwise from `snapshot`.
    pub fn changed_since(&self, snapshot: &BTreeMap<String, Tensor>) -> Vec<String> {
        snapshot
            .iter()
            .filter(|(name, old)| self.get(name).is_none_or(|p| !p.value.bit_eq(old)))
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Overwrites every parameter with `N(0, std²)` noise; used by tests and
    /// gradient checks that need non-degenerate weights.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in self.params.values_mut() {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }
}
