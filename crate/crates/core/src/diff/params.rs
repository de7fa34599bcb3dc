use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Graph, Tensor};
use crate::error::{Error, Result};

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named trainable arrays that outlive any single graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    arrays: BTreeMap<String, ParamArray>,
}

/// Per-parameter gradients, keyed like the store.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "param",
                format!("`{name}` has shape {shape:?} but {} values", data.len()),
            ));
        }
        self.arrays.insert(name, ParamArray { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamArray)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamArray)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .values()
            .all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Registers every array as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        let tensors = self
            .arrays
            .iter()
            .map(|(name, a)| (name.clone(), graph.param(&a.shape, a.data.clone())))
            .collect();
        BoundParams { tensors }
    }
}

/// Parameters of a [`ParamStore`] living in one graph.
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    /// Panics on unknown names; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Gradients after a backward pass; parameters the loss never touched
    /// report zeros.
    pub fn grads(&self) -> ParamGrads {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
