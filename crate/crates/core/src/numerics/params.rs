use rand::Rng as _;

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named, trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad());
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Adds a tensor drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of a parameter, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape(format!("assign {} values to {:?}", data.len(), t.shape())));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Places every parameter in `graph`. With `track == false` the graph
    /// records no gradients, which is the inference path.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>, track: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.borrowed(t, track)).collect())
    }

    /// Stores gradients read back from a graph; missing entries become zeros.
    pub fn set_grads(&mut self, grads: Vec<Option<Vec<f64>>>) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), self.tensors.len())));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

/// Graph handles for every parameter of a [`Params`] store.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn grads(&self, graph: &Graph<'_>) -> Vec<Option<Vec<f64>>> {
        self.0.iter().map(|&v| graph.grad(v).map(<[f64]>::to_vec)).collect()
    }
}
