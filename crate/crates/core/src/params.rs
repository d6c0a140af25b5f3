//! Named parameter storage.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// All learnable weights of a model, keyed by a stable dotted path and kept
/// in insertion order. The order is the serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Every weight concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all weights from a flat vector laid out as [`Self::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every parameter as a borrowed leaf on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> Bound<'p> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf_ref(t, trainable))
            .collect();
        Bound { store: self, vars }
    }
}

/// Parameters of a [`ParamStore`] as they appear on one tape.
pub struct Bound<'p> {
    store: &'p ParamStore,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    pub fn tensor(&self, name: &str) -> Result<&'p Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    pub fn grads(&self, tape: &Tape<'_>) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.store.iter())
            .map(|(&v, (_, t))| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }
}

/// Deterministic initializers drawing from one seeded stream.
pub struct Initializer<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Initializer<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Glorot-uniform matrix.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("finite init")
    }

    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("finite init")
    }

    pub fn zeros(&mut self, len: usize) -> Tensor {
        Tensor::zeros(vec![len])
    }

    pub fn ones(&mut self, len: usize) -> Tensor {
        Tensor::new(vec![len], vec![1.0; len]).expect("finite init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        store.insert("b", Tensor::zeros(vec![1, 3])).unwrap();
        store.assign_flat(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(store.get("b").unwrap().data(), &[3.0, 4.0, 5.0]);
        assert_eq!(store.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(store.insert("a", Tensor::zeros(vec![2])).is_err());
    }
}
