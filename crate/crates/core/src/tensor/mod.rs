//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation performed on it as a node; calling
//! [`Graph::backward`] on a scalar node replays the adjoints in reverse
//! recording order. Parameters live outside the graph as plain [`Tensor`]s
//! and are copied in as leaves for each forward pass, so one graph per
//! sample (or per batch) is the normal usage pattern.

mod conv;
mod gemm;
mod graph;
pub mod gradcheck;

pub use graph::{Graph, Var, CHANNEL_NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "tensor",
                msg: format!("shape {shape:?} must be non-empty with positive extents"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "tensor",
                msg: format!(
                    "shape {shape:?} holds {numel} elements but {} values were given",
                    data.len()
                ),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape is valid")
    }

    /// Marks the tensor as a differentiation target.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Dimension {
                op: "set_grad",
                msg: format!("gradient has {} entries, tensor has {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
