use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors. Ordered by name so iteration (and therefore
/// initialization, serialization and optimizer updates) is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Re-draw every parameter uniformly from `[-scale, scale]`, visiting names in order.
    pub fn init_uniform<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x = T::lit(rng.gen_range(-scale..=scale));
            }
        }
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> T {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

/// Gradients keyed by parameter name; same key set as the [`ParamStore`] they came from.
pub type Gradients<T> = ParamStore<T>;
