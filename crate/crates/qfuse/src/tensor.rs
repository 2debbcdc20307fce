//! Dense row-major f64 tensor.

use crate::error::TensorError;
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// `grad`, when present, always has the same number of elements as `data`;
/// it is populated by [`crate::graph::Graph::backward`] for leaves created
/// with `requires_grad`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} does not hold {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    /// 2-D tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on {}-d tensor", self.shape.len()),
        }
    }

    /// Columns of a 2-D tensor; the length of a 1-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on {}-d tensor", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }
}
