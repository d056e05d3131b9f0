use thiserror::Error;

/// Errors raised by tensor construction, tape ops, and optimizers.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected shape {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} requires {expected} values, got {got}")]
    ShapeCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("duplicate parameter name `{name}`")]
    DuplicateParameter { name: String },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("learning rate must be non-negative, got {0}")]
    BadLearningRate(f64),
}

/// A dense row-major tensor of 64-bit floats.
///
/// Rank is 1 or 2. All stored values are finite; constructors reject NaN and
/// infinities so numerical blow-ups surface as errors at the op that produced
/// them. `grad`, when present, always has the same length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating shape/value agreement and finiteness.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> super::Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(NumericsError::BadShape {
                op: "Tensor::new",
                expected: "rank 1 or 2".into(),
                got: shape,
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::EmptyInput { op: "Tensor::new" });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumericsError::ShapeCount {
                shape,
                expected,
                got: values.len(),
            });
        }
        ensure_finite("Tensor::new", &values)?;
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> super::Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> super::Result<Self> {
        if values.is_empty() {
            return Err(NumericsError::EmptyInput { op: "Tensor::vector" });
        }
        Tensor::new(vec![values.len()], values)
    }

    pub fn scalar(value: f64) -> super::Result<Self> {
        Tensor::new(vec![1, 1], vec![value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols); a rank-1 tensor is a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// Ensure a gradient buffer exists, zero-filled if absent.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }

    /// Add `delta` into the gradient buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        self.ensure_grad();
        let g = self.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

pub(crate) fn ensure_finite(op: &'static str, values: &[f64]) -> super::Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}
