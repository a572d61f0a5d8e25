//! A small dense tensor engine: row-major `f64` arrays with an optional
//! gradient slot, the forward/backward kernels the network needs, Adam, and a
//! central-difference gradient checker.
//!
//! There is no tape. Each forward kernel returns whatever its backward needs
//! and callers compose the backward functions in reverse order by hand.

mod adam;
mod gradcheck;
mod ops;

pub use adam::AdamState;
pub use gradcheck::{grad_check, numeric_gradient};
pub use ops::{
    add, conv2d, conv2d_backward, conv2d_forward, matmul, matmul_backward, relu, relu_backward,
    softmax_rows, softmax_rows_backward, ConvContext, ConvGrads,
};
pub(crate) use ops::{softmax_backward_row, softmax_in_place};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            data: (0..numel).map(&mut f).collect(),
            shape,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data under a new shape. The gradient slot is not carried over;
    /// the backward of a reshape is a reshape of the incoming gradient.
    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        self.clone_without_grad().into_reshaped(new_shape)
    }

    pub fn into_reshaped(mut self, new_shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let new_shape = new_shape.into();
        let numel: usize = new_shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                new_shape,
                numel
            )));
        }
        self.shape = new_shape;
        self.grad = None;
        Ok(self)
    }

    fn clone_without_grad(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::from_fn([4, 32, 7, 7], |i| i as f64 * 0.5);
        let flat = t.reshape([4, 1568]).unwrap();
        assert_eq!(flat.shape(), &[4, 1568]);
        assert_eq!(flat.reshape([4, 32, 7, 7]).unwrap(), t);
    }

    #[test]
    fn reshape_row_major_law() {
        let (n, c, r) = (4, 32, 7);
        let t = Tensor::from_fn([n, c, r, r], |i| i as f64);
        let flat = t.reshape([n, c * r * r]).unwrap();
        let (ni, ci, i, j) = (2, 17, 3, 5);
        let src = ((ni * c + ci) * r + i) * r + j;
        assert_eq!(
            flat.data()[ni * c * r * r + ci * r * r + i * r + j],
            t.data()[src]
        );
    }

    #[test]
    fn reshape_count_mismatch() {
        let t = Tensor::zeros([2, 3]);
        assert!(matches!(t.reshape([4, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        let mut t = Tensor::zeros([3]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 3);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn reshape_preserves_values(values in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let t = Tensor::new([3, 4], values.clone()).unwrap();
            for shape in [vec![12], vec![2, 6], vec![2, 2, 3]] {
                let r = t.reshape(shape).unwrap();
                prop_assert_eq!(r.data(), &values[..]);
            }
        }
    }
}
