//! Named, ordered collections of learnable tensors.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Places every parameter on the tape as a trainable leaf, in order.
    pub fn register(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.param(p.tensor.clone())).collect()
    }

    /// Copies gradients from a differentiated graph into the gradient slots.
    /// Parameters the loss did not reach get a zero gradient.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::Graph(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); p.tensor.len()]);
            p.tensor.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}
