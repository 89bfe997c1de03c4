//! Named parameter storage shared between training steps.

use std::collections::BTreeMap;

use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{DiffError, Result};

/// Trainable tensors plus non-trainable buffers (running statistics), keyed by
/// hierarchical names such as `head/0/down1/conv/w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
    buffers: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<f32>> {
        self.buffers
            .get(name)
            .ok_or_else(|| DiffError::Invalid(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Load every trainable tensor whose name starts with `prefix` onto `g`.
    ///
    /// With `trainable == false` the tensors become constants and receive no
    /// gradient.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, t) in self.params.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let v = if trainable {
                g.param(t.cast())
            } else {
                g.constant(t.cast())
            };
            vars.insert(name.clone(), v);
        }
        Binding { vars }
    }
}

/// Names of parameters mapped to their leaves on one graph.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::Invalid(format!("parameter {name} is not bound")))
    }

    pub fn merge(&mut self, other: Binding) {
        self.vars.extend(other.vars);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Collect gradients of bound parameters. Parameters that did not take part
    /// in the loss are omitted.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<f32>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g.cast())))
            .collect()
    }
}
