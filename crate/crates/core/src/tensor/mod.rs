//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain row-major storage. Differentiable computation goes
//! through a [`Graph`](graph::Graph): every forward call records the
//! operation together with its input node ids, and `backward` replays the
//! record in reverse, accumulating gradients into every leaf that requested
//! them.

mod conv;
pub mod gradcheck;
pub mod graph;
pub mod io;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
///
/// `grad` is populated on graph leaves after `backward` and always has the
/// same element count as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(format!(
                "zero-length dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row stride table for a row-major shape (innermost stride = 1).
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_element_count() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[3]).is_ok());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let r = t.clone().reshaped(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
