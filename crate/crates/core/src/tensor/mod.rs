//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] through [`Var`] handles. A tape is built for one forward pass,
//! consumed by [`Tape::backward`], and then dropped.

pub(crate) mod fastmath;
mod gradcheck;
mod kernels;
mod tape;

use std::fmt;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use tape::{Tape, Var};

/// Primitive operations recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Affine,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Concat,
    Slice,
    Reshape,
    Gather,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Exp,
    Log,
    Softmax,
    Sum,
    Mean,
    L2Normalize,
    LstmPointwise,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::LstmPointwise => "lstm_pointwise",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: OpKind, msg: String },
    #[error("{op}: input {value} is outside the domain")]
    Domain { op: OpKind, value: f64 },
    #[error("{op}: forward result contains a non-finite value")]
    NonFinite { op: OpKind },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward: loss must have shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape has no recorded operations")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// A 2-D tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data).expect("valid matrix")
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // x * 0 is NaN exactly when x is infinite or NaN; this form vectorizes.
        self.data.iter().fold(0.0, |acc, &v| acc + v * 0.0) == 0.0
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.is_empty() || expected != self.data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
