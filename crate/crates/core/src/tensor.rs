//! Dense row-major tensors, the carrier for images, feature maps and parameters.

use crate::error::{CtxError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CtxError::ShapeMismatch(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(CtxError::ShapeMismatch(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(CtxError::NonFinite(format!("{what} at flat index {i}")));
        }
        Ok(())
    }

    /// Flat index for a [C,H,W] tensor.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.shape[1] + h) * self.shape[2] + w
    }

    /// Flat index for an [N,M] tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx3(c, h, w)]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[self.idx2(r, c)]
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn fill(&mut self, v: T) {
        for a in self.data.iter_mut() {
            *a = v;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_val())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn finite_check() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.assert_finite("t").is_err());
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.assert_finite("t").is_ok());
    }

    #[test]
    fn indexing() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at3(1, 0, 1), 5.0);
        let m = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(m.at2(1, 2), 5.0);
    }
}
