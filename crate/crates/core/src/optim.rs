//! Named parameter tensors with paired gradients, and plain SGD with
//! momentum and weight decay.

use crate::error::{CtxError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone)]
struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
    velocity: Tensor<T>,
}

/// Map from unique name to (value, grad) pairs. Iteration order is
/// lexicographic, so reductions and updates are deterministic.
#[derive(Clone)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CtxError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Entry { value, grad: Tensor::zeros(shape.clone()), velocity: Tensor::zeros(shape) },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds `g` into the gradient of `name` if present; returns whether the
    /// store owns the name.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> bool {
        match self.entries.get_mut(name) {
            Some(e) => {
                e.grad.add_assign(g);
                true
            }
            None => false,
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for e in self.entries.values_mut() {
            e.grad.scale_assign(c);
        }
    }

    /// v <- momentum*v + (grad + weight_decay*value); value <- value - lr*v.
    pub fn sgd_step(&mut self, lr: T, weight_decay: T, momentum: T) {
        for e in self.entries.values_mut() {
            for i in 0..e.value.len() {
                let g = e.grad.data()[i] + weight_decay * e.value.data()[i];
                let v = momentum * e.velocity.data()[i] + g;
                e.velocity.data_mut()[i] = v;
                e.value.data_mut()[i] = e.value.data()[i] - lr * v;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.cast()).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = store_with(1.0);
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn lr_zero_no_change() {
        let mut s = store_with(1.0);
        s.grad_mut("w").unwrap().data_mut()[0] = 5.0;
        s.sgd_step(0.0, 0.0, 0.0);
        assert_eq!(s.value("w").unwrap().item(), 1.0);
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store_with(1.0);
        s.grad_mut("w").unwrap().data_mut()[0] = 1.0;
        s.sgd_step(0.1, 0.0, 0.0);
        assert!((s.value("w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_step() {
        let mut s = store_with(1.0);
        s.sgd_step(0.1, 0.1, 0.0);
        assert!((s.value("w").unwrap().item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = store_with(0.0);
        s.grad_mut("w").unwrap().data_mut()[0] = 1.0;
        s.sgd_step(1.0, 0.0, 0.5);
        // v = 1, w = -1
        s.grad_mut("w").unwrap().data_mut()[0] = 1.0;
        s.sgd_step(1.0, 0.0, 0.5);
        // v = 0.5 + 1 = 1.5, w = -2.5
        assert!((s.value("w").unwrap().item() + 2.5).abs() < 1e-15);
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("b", Tensor::scalar(0.0)).unwrap();
        s.insert("a", Tensor::scalar(0.0)).unwrap();
        s.insert("c", Tensor::scalar(0.0)).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }
}
