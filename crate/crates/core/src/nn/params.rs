use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Normal(0, σ) truncated at ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
}

impl ParamInit {
    fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match *self {
            ParamInit::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            }
            ParamInit::Zeros => Tensor::zeros(shape),
            ParamInit::Ones => Tensor::full(shape, 1.0),
        }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: ParamInit, rng: &mut impl Rng) {
        let prev = self.tensors.insert(name.to_string(), init.sample(shape, rng));
        assert!(prev.is_none(), "parameter {name} declared twice");
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Marks the store as frozen: bound tensors become graph constants.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Bind a tensor into `g`, as a trainable parameter unless frozen.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self.get(name)?;
        Ok(if self.frozen {
            g.constant(t.clone())
        } else {
            g.param(name, t)
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            frozen: self.frozen,
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            frozen: false,
        }
    }
}
