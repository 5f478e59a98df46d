use std::collections::BTreeMap;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Named trainable tensors.
///
/// Names are dot-separated paths (`decoder.tf.lstm3.w_ih`). Iteration is in
/// lexicographic name order. A tensor shared between sub-networks lives
/// under exactly one name and every user binds that name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts `tensor` (a gradient buffer is attached if missing).
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_owned()));
        }
        let tensor = if tensor.requires_grad() { tensor } else { tensor.with_grad() };
        self.entries.insert(name.to_owned(), tensor);
        Ok(())
    }

    /// Inserts or replaces without attaching a gradient buffer.
    pub fn insert_raw(&mut self, name: &str, tensor: Tensor<T>) {
        self.entries.insert(name.to_owned(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds parameter gradients from a backward pass into the stored buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.params() {
            let t = self.get_mut(name)?;
            let buf = t.grad_mut().ok_or_else(|| Error::MissingGrad(name.to_owned()))?;
            buf.iter_mut().zip(g).for_each(|(b, g)| *b += *g);
        }
        Ok(())
    }

    /// Read-only snapshot sharing parameter data and dropping gradients;
    /// safe to hand to concurrent inference workers.
    pub fn cast<S: Scalar>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn frozen(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.frozen())).collect(),
        }
    }
}
