//! Named parameter storage.
//!
//! Every learnable tensor and every persistent buffer (batch-norm running
//! statistics) lives in one flat registry, addressed by `ParamId`. Gradients
//! accumulate here across tape backward passes until an optimizer step
//! consumes them.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Network weight, updated by SGD.
    Weight,
    /// Architecture parameter, updated by Adam.
    Alpha,
    /// Non-trainable buffer (running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        let grad = vec![S::ZERO; value.numel()];
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contribution: &[S]) {
        let g = &mut self.params[id.0].grad;
        assert_eq!(g.len(), contribution.len(), "gradient length mismatch");
        g.iter_mut().zip(contribution).for_each(|(a, &b)| *a += b);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::ZERO);
        }
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar elements across all parameters of a kind.
    pub fn count_elements(&self, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel())
            .sum()
    }
}
