//! Dense `f64` tensors with a small reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a plain value: a shape plus row-major data held behind an
//! `Arc`, so cloning is cheap and parameter values can move between threads.
//! Differentiation happens on a [`Graph`], which records every operation
//! applied to its [`Var`] handles and replays the adjoints once in reverse.
//!
//! ```
//! use kdbench_core::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let a = g.leaf(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap().with_grad());
//! let b = g.constant(&Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
//! let y = a.matmul(b).unwrap();
//! assert_eq!(y.value().data(), &[3.0, 7.0]);
//! let grads = g.backward(y.sum()).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

pub use graph::{concat_last, cosine_similarity_rows, embedding, mse, soft_cross_entropy, split_last};
pub use graph::{Gradients, Graph, Var};

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("backward already ran on this graph; record a new forward pass first")]
    GraphConsumed,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape { len: data.len(), shape });
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel(shape)]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), Arc::new(vec![value]))
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], Arc::new(data))
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidArgument { op: "from_rows", reason: "ragged rows".into() });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of {:?}", self.shape);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Width of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows once every leading axis is flattened.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::clone(&self.data)))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.len(), "gradient length must match tensor length");
        }
        self.grad = grad;
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// A value-only copy that does not require gradients.
    pub fn detached(&self) -> Self {
        Self::from_parts(self.shape.clone(), Arc::clone(&self.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Plain (untracked) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(), false, other.data(), false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        kernels::transpose_into(self.data(), 1, r, c, &mut out);
        Tensor::new(vec![c, r], out)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<f64> = self.data.iter().take(PREVIEW).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("truncated", &(self.data.len() > PREVIEW))
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(TensorError::InvalidShape { .. })));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn data_mut_copies_shared_storage() {
        let a = Tensor::ones(&[2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn eager_matmul_and_transpose() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(b.matmul(&b).is_err());
    }
}
