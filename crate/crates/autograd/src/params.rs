//! Named parameter collections with per-tensor freeze flags.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub tensor: Tensor<S>,
    pub frozen: bool,
}

/// Named tensors keyed by `component/path` names. Iteration order is the
/// lexicographic name order, which keeps every derived byte stream stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

pub type ParameterStore = ParamStore<f32>;

/// Component prefix of a parameter name (`"lm/blocks.0/wq"` -> `"lm"`).
pub fn component_of(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, frozen: bool) {
        self.entries.insert(name.into(), ParamEntry { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<S>> {
        self.entries.remove(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(true)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.frozen = frozen;
        }
    }

    /// Sets the freeze flag of every tensor under `component/`.
    pub fn freeze_component(&mut self, component: &str, frozen: bool) {
        for (name, e) in self.entries.iter_mut() {
            if component_of(name) == component {
                e.frozen = frozen;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| !e.frozen).map(|(k, _)| k.clone()).collect()
    }

    /// Sorted, de-duplicated component prefixes.
    pub fn components(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| component_of(k).to_string()).collect();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Copies every tensor of `other` into this store (overwriting same-named entries).
    pub fn merge(&mut self, other: &ParamStore<S>) {
        for (k, v) in other.entries.iter() {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Sub-store holding only the listed components.
    pub fn filter_components(&self, components: &[&str]) -> ParamStore<S> {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| components.contains(&component_of(k)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), ParamEntry { tensor: v.tensor.cast(), frozen: v.frozen }))
                .collect(),
        }
    }
}
