//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a node recording its
//! inputs, so a single reverse sweep ([`Tape::backward`]) yields gradients
//! for all trainable leaves. Everything is row-major `f64`; there is no
//! broadcasting beyond one-element scalars and row-wise bias addition.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{Tape, TensorId};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected shape {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?} (needs {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("input of length {len} is too short for filter width {width}")]
    InputTooShort { len: usize, width: usize },
    #[error("row index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A dense row-major float64 array with an optional gradient buffer.
///
/// Tensors are plain values; differentiation happens on the [`Tape`], which
/// copies leaf values in and hands gradients back out. The `grad` buffer is
/// where the training loop parks the gradient pulled off a tape between the
/// backward pass and the optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Entries drawn i.i.d. from `U(lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// Entries drawn i.i.d. from `N(mean, sd^2)` via Box-Muller.
    pub fn normal(shape: Vec<usize>, mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient buffer; must match the tensor shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> TensorResult<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Errors with the first offending coordinate if any entry is NaN/Inf.
    pub fn check_finite(&self, context: &str) -> TensorResult<()> {
        check_finite_slice(&self.data, context)
    }
}

pub(crate) fn check_finite_slice(data: &[f64], context: &str) -> TensorResult<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
