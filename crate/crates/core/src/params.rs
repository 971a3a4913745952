//! Named parameter storage and the per-forward binding onto a tape.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{MvftError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// All learnable tensors of a model, keyed by dotted name.
///
/// Iteration order is lexicographic by name, which fixes the order of every
/// traversal (initialization, optimizer updates, serialization).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| MvftError::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| MvftError::contract(format!("unknown parameter `{name}`")))
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialized tensor.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut SeededRng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// Lazily records parameters on a tape the first time a forward pass uses
/// them, so parameters of unused streams never enter the graph.
pub struct Binder<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    track: bool,
}

impl<'a> Binder<'a> {
    /// `track = false` records parameters as constants (inference only).
    pub fn new(params: &'a ParamStore, track: bool) -> Self {
        Binder {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            track,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let var = if self.track {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Runs backward and maps gradients back to parameter names. Parameters
    /// the forward pass never touched receive zero gradients.
    pub fn backward(self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let bound = self.bound;
        let params = self.params;
        let grads: Gradients = self.tape.backward(loss)?;
        Ok(params
            .iter()
            .map(|(name, t)| {
                let g = match bound.get(name) {
                    Some(&v) => grads.get_or_zeros(v, t.shape()),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect())
    }
}
