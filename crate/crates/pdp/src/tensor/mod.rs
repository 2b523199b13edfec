//! Dense tensors with flat row-major storage and a per-step autodiff tape.
//!
//! Tensors are plain values: a shape, a flat `f64` buffer, and an optional
//! gradient buffer filled after a backward pass. All differentiable
//! computation goes through [`Graph`], a tape that records operations in
//! execution order and replays them in reverse for gradients.

mod graph;
mod optim;

pub use graph::{Graph, VarId};
pub use optim::{LrSchedule, Sgd};

use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes do not compose for the requested operation.
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    /// A dimension constraint was violated (e.g. non-positive conv output).
    Dimension(String),
    /// Invalid input values (e.g. label out of range).
    Input(String),
    /// Operation called in an invalid state (e.g. backward twice).
    State(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected:?}, got {got:?}")
            }
            Self::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Self::Input(msg) => write!(f, "input error: {msg}"),
            Self::State(msg) => write!(f, "state error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// An n-dimensional dense array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Creates a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// A 1-D tensor over the given values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// Marks this tensor as a gradient target for subsequent graphs.
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// True when every stored value is finite. NaN/Inf is an explicit
    /// checkable state, never silently propagated by callers.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch { expected: shape, got: self.shape.clone() });
        }
        Ok(Self { shape, data: self.data.clone(), requires_grad: self.requires_grad, grad: None })
    }
}

/// Numerically stable logistic function: never produces NaN for finite or
/// infinite input, and underflows cleanly to 0 or 1.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
