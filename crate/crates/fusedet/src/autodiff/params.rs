//! Named parameter storage shared across tapes.
//!
//! Parameters live outside any tape; each forward pass copies values into
//! leaves via [`crate::autodiff::Tape::param`] and gradients flow back through
//! `accumulate_param_grads`. Iteration order is insertion order, which keeps
//! the optimizer and checkpoints deterministic.

use indexmap::IndexMap;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) {
        let name = name.into();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; data.len()];
        let prev = self.params.insert(name.clone(), Param { data, shape, grad });
        debug_assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_grads() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], vec![2]);
        assert_eq!(store.get("w").unwrap().grad, vec![0.0, 0.0]);
        store.get_mut("w").unwrap().grad[0] = 3.0;
        store.zero_grads();
        assert_eq!(store.get("w").unwrap().grad, vec![0.0, 0.0]);
        assert!(store.get("missing").is_err());
    }
}
