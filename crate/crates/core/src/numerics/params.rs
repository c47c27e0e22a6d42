use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which half of the model a parameter belongs to. Freezing acts on groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Frontend,
    Backend,
}

#[derive(Clone, Debug)]
pub struct Param<R> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<R>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, tensor: tensor.with_requires_grad(true) });
        id
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` matrix (or any
    /// shape whose first two extents play those roles).
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| R::lit(rng.random_range(-limit..limit)));
        self.add(name, group, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        self.add(name, group, Tensor::full(shape, R::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter gradients held by `graph` into the stored slots.
    pub fn accumulate(&mut self, graph: &Graph<R>) -> Result<()> {
        let mut grads: Vec<_> = graph.param_grads().collect();
        grads.sort_by_key(|(id, _)| *id);
        for (id, g) in grads {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Adds explicit `(id, gradient)` pairs, in the given order.
    pub fn accumulate_pairs(&mut self, grads: &[(ParamId, Vec<R>)]) -> Result<()> {
        for (id, g) in grads {
            let len = self.params.len();
            self.params.get_mut(id.0).ok_or(Error::Index { index: id.0, len })?.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Flat copy of every value, in parameter order.
    pub fn flat_values(&self) -> Vec<R> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }
}
