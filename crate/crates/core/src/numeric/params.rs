use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::Graph;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen parameters enter graphs untracked and are skipped by the optimizer.
    pub frozen: bool,
}

/// Named parameters of one model instance.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        Ok(id)
    }

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(name, shape, limit, rng)
    }

    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Sets the gradient of every trainable parameter to zero.
    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of a finished backward pass into the stored grads.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, var) in graph.param_leaves() {
            let Some(g) = graph.grad(var) else { continue };
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Copies values for every name present in both stores (shapes must match).
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.get(id);
                if src.value.shape() != p.value.shape() {
                    return Err(Error::dim(
                        "load_values",
                        format!(
                            "`{}` has shape {:?}, source has {:?}",
                            p.name,
                            p.value.shape(),
                            src.value.shape()
                        ),
                    ));
                }
                p.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
