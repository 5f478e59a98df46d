use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::Scalar;

/// Adam with bias correction and a stepwise learning-rate decay:
/// the rate at epoch `e` is `lr0 / decay_factor^(e / epochs_per_decay)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr0: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub epochs_per_decay: usize,
    pub decay_factor: T,
    pub(crate) m: BTreeMap<String, Vec<T>>,
    pub(crate) v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Defaults: betas (0.9, 0.999), eps 1e-8, divide by 3 every 5 epochs.
    pub fn new(lr0: T) -> Self {
        Self {
            step: 0,
            lr0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            epochs_per_decay: 5,
            decay_factor: T::lit(3.0),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_schedule(mut self, epochs_per_decay: usize, decay_factor: T) -> Self {
        self.epochs_per_decay = epochs_per_decay.max(1);
        self.decay_factor = decay_factor;
        self
    }

    /// Effective learning rate at zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> T {
        let decays = (epoch / self.epochs_per_decay) as i32;
        self.lr0 / self.decay_factor.powi(decays)
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// One update of every parameter in `params`, then zeroes their grads.
    pub fn step(&mut self, params: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        for (name, t) in params.iter() {
            if !t.requires_grad() {
                return Err(Error::MissingGrad(name.to_owned()));
            }
        }
        self.step += 1;
        let lr = self.lr_at(epoch);
        let t_i = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t_i);
        let bc2 = T::one() - self.beta2.powi(t_i);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, tensor) in params.iter_mut() {
            let len = tensor.len();
            let m = self.m.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); len]);
            let v = self.v.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); len]);
            let (data, grad) = tensor.parts_mut();
            let grad = grad.expect("checked above");
            for i in 0..len {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(x: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![x])).unwrap();
        s.get_mut("w").unwrap().grad_mut().unwrap()[0] = g;
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut s = one_param(0.5, 1.0);
        let mut adam = AdamState::new(1e-4);
        adam.step(&mut s, 0).unwrap();
        let delta = s.get("w").unwrap().data()[0] - 0.5;
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta}");
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn schedule_divides_by_three_every_five_epochs() {
        let adam = AdamState::<f64>::new(1e-4);
        assert_eq!(adam.lr_at(0), 1e-4);
        assert_eq!(adam.lr_at(4), 1e-4);
        assert!((adam.lr_at(5) - 1e-4 / 3.0).abs() < 1e-20);
        assert!((adam.lr_at(10) - 1e-4 / 9.0).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = one_param(0.25, 0.0);
        let mut adam = AdamState::new(1e-2);
        for e in 0..3 {
            adam.step(&mut s, e).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        s.insert_raw("frozen.w", Tensor::vector(vec![1.0]));
        let err = AdamState::new(1e-3).step(&mut s, 0).unwrap_err();
        assert!(err.to_string().contains("frozen.w"));
    }
}
