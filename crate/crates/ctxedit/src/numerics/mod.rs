//! Dense f64 tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Values live in two forms: [`Tensor`] is the persistent, owning type used
//! for parameters and buffers; [`tape::Tape`] records a single forward pass
//! over lightweight [`tape::Var`] handles and is discarded after
//! [`tape::Tape::backward`]. Parameters are bound onto a fresh tape at the
//! start of every training step, so no graph state leaks between steps.
//!
//! Storage is row-major and dense throughout. Shapes are restricted to
//! 1-D vectors, 2-D matrices, and `[1]` scalars; that is all the pipeline
//! needs and it keeps every gradient rule easy to audit.

pub mod gradcheck;
pub mod tape;

use std::fmt;

/// Result alias for tensor operations.
pub type NumResult<T> = Result<T, TensorError>;

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands have shapes the operation cannot combine.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// The axis argument does not exist for the given shape.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    /// The operation requires a 2-D operand.
    NotMatrix {
        op: &'static str,
        shape: Vec<usize>,
    },
    /// Provided data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// backward was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// A row, column, or class index is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A forward op produced a non-finite value from finite inputs.
    NonFinite { op: &'static str },
    /// Numerical degeneracy that the caller must resolve (e.g. a zero-norm
    /// vector where a direction is required).
    Degenerate { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Self::InvalidAxis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} invalid for shape {shape:?}")
            }
            Self::NotMatrix { op, shape } => {
                write!(f, "{op}: expected a 2-D operand, got shape {shape:?}")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            Self::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Self::Degenerate { op, detail } => write!(f, "{op}: degenerate input ({detail})"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Persistent dense tensor: parameter or buffer.
///
/// `grad`, when present, always has the same length as `data`; it is the
/// accumulation target that training steps harvest from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw row-major data.
    pub fn from_vec(data: Vec<f64>, shape: Vec<usize>) -> NumResult<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            data,
            shape,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            data: vec![v],
            shape: vec![1],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr_normal::sample_standard_normal;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sample_standard_normal(rng) * std).collect();
        Self {
            data,
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Box-Muller standard normal. Kept local so everything depends only on the
/// core RNG stream and nothing distribution-crate specific.
pub fn rand_normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

mod rand_distr_normal {
    pub use super::rand_normal as sample_standard_normal;
}
