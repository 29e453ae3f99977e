//! Dense N-dimensional arrays and reverse-mode differentiation.
//!
//! Tensors are plain row-major buffers. All reductions accumulate in a
//! fixed row-major order so that identical inputs produce bit-identical
//! results, which the reproducibility tests rely on. Training runs at
//! `f32`; gradient checks instantiate everything at `f64`, where central
//! finite differences are trustworthy.

mod tape;

pub use tape::{Tape, TapeId};

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MaeError, Result};

/// Scalar element type; implemented for `f32` (training) and `f64`
/// (gradient-check mode).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; every constant we feed through this is
    /// representable in `f32`.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense tensor: a shape and a contiguous row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and matching buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(MaeError::Config(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MaeError::Dimension {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf when registered on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single stored value of a rank-1 singleton tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Borrow row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64c(v.to_f64c())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Largest absolute element difference between two equally shaped tensors.
pub fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).abs())
        .fold(0.0, f64::max)
}
