use std::sync::Arc;

use crate::error::{Error, Result};
use crate::Scalar;

/// Dense row-major array with an optional gradient buffer.
///
/// `data` is reference counted so that tapes and frozen snapshots can share
/// parameter storage without copying; the optimizer writes through
/// [`Arc::make_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: Arc::new(data),
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len]).expect("zeros has a consistent shape")
    }

    pub fn vector(data: Vec<T>) -> Self {
        let len = data.len();
        Self::new(vec![len.max(1)], data).expect("vector has a consistent shape")
    }

    pub fn scalar(x: T) -> Self {
        Self::vector(vec![x])
    }

    /// Attaches a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (Arc::make_mut(&mut self.data).as_mut_slice(), self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Converts every element (and the gradient buffer) to another scalar type.
    pub fn cast<S: Scalar>(&self) -> Tensor<S> {
        let conv = |v: &[T]| v.iter().map(|x| S::lit(x.as_f64())).collect::<Vec<S>>();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(conv(&self.data)),
            grad: self.grad.as_deref().map(conv),
        }
    }

    /// Copy sharing `data`, with no gradient buffer.
    pub fn frozen(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad: None,
        }
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(Error::BadShape {
            op: "tensor",
            shape: shape.to_vec(),
        });
    }
    Ok(())
}
