use std::ops::Index;
use std::sync::Arc;

use super::graph::{Graph, Var};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors of one model. Values sit behind `Arc` so that
/// binding them into a graph is free and trained models can be shared
/// across worker threads.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(self.values.iter().map(|v| g.shared(v.clone(), trainable)).collect())
    }

    /// Checkpoint entries, each name prefixed with `namespace/`.
    pub fn entries(&self, namespace: &str) -> Vec<(String, &Tensor)> {
        self.iter().map(|(n, t)| (format!("{namespace}/{n}"), t)).collect()
    }

    /// Overwrites every parameter from checkpoint entries under `namespace/`.
    pub fn load_entries(&mut self, namespace: &str, entries: &[(String, Tensor)]) -> Result<()> {
        for i in 0..self.values.len() {
            let key = format!("{namespace}/{}", self.names[i]);
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t.clone());
        }
        Ok(())
    }
}

pub fn init_normal(shape: &[usize], std: f32, rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
    t
}

/// Glorot-uniform matrix for a `fan_in × fan_out` weight.
pub fn init_glorot(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    t.data_mut().iter_mut().for_each(|v| *v = (rng.uniform() * 2.0 - 1.0) * limit);
    t
}
