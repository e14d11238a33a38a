use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub trainable: bool,
    pub adam: Option<AdamState<F>>,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None, trainable: true, adam: None });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks a parameter frozen (`false`) or trainable. Freezing drops its gradient
    /// and optimizer state.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
            p.adam = None;
        }
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Resets the gradient buffer of every trainable parameter to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            match &mut p.grad {
                Some(g) => g.data_mut().fill(F::zero()),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Adds `grads` into the stored gradient buffers, scaled by `scale`.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: F) {
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut self.params[i];
            if !p.trainable {
                continue;
            }
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if scale == F::one() {
                for (b, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += x;
                }
            } else {
                for (b, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += scale * x;
                }
            }
        }
    }

    /// Replaces the stored gradients with `grads`, taking ownership of the
    /// buffers. Trainable parameters absent from `grads` get zero gradients.
    /// Equivalent to `zero_grads` followed by `accumulate(grads, 1)`.
    pub fn set_grads(&mut self, grads: Gradients<F>) {
        for (p, g) in self.params.iter_mut().zip(grads.grads) {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            match (g, &mut p.grad) {
                (Some(g), slot) => *slot = Some(g),
                (None, Some(buf)) => buf.data_mut().fill(F::zero()),
                (None, slot) => *slot = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    pub fn clear_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.adam = None;
        }
    }
}

/// Parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub(crate) grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
