//! Dense row-major f64 tensors and the small layer zoo built on them.
//!
//! Everything here is deliberately plain: flat `Vec<f64>` storage, explicit
//! shapes, direct-loop kernels with a fixed summation order so repeated runs
//! are bit-identical. Non-finite values are rejected at construction and at
//! every layer output.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_tensors, save_tensors};
pub use layers::{
    avgpool_global_backward, avgpool_global_forward, conv2d_backward, conv2d_forward,
    conv2d_output_extent, fc_backward, fc_forward, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, MaxPoolCache,
};
pub use params::{kaiming_conv, kaiming_fc, sgd_step, LayerParams};

use crate::error::{Error, Result};

/// Dense tensor: row-major values plus an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite
    /// values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::Shape("tensor shape must have at least one axis".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("tensor shape {shape:?} has a zero axis")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {expected} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape(format!(
                "tensor with shape {shape:?} holds non-finite values"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Internal constructor for values a kernel just computed. The caller is
    /// responsible for running a finiteness check before handing the tensor
    /// out of the module.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors unless every value is finite; `what` names the producing
    /// operation in the message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Training(format!("{what} produced non-finite values")))
        }
    }

    /// Flat index for a 3-axis tensor laid out `[c][y][x]`.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }
}
