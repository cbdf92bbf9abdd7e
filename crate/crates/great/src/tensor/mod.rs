//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is plain storage: a shape plus contiguous double-precision
//! values, optionally carrying a gradient buffer. Differentiable computation
//! runs on a [`Tape`](tape::Tape), which records primitive operations during
//! the forward pass and replays them in reverse to accumulate gradients.
//!
//! Scalars are rank-0 tensors (empty shape, one value). Broadcasting is
//! limited to bias addition over the trailing dimension.

mod tape;

pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from a shape and matching row-major values.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                msg: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    numel(&shape),
                    values.len()
                ),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                msg: format!("shape {shape:?} has a zero dimension"),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient target and allocates its grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; present iff `requires_grad`.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Overwrites the gradient buffer (allocating it if needed).
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "Tensor::set_grad",
                msg: format!(
                    "gradient length {} does not match tensor length {}",
                    grad.len(),
                    self.values.len()
                ),
            });
        }
        self.requires_grad = true;
        self.grad = Some(grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// One row of a 2-D tensor.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "row() requires a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        let d = self.shape[1];
        if i >= self.shape[0] {
            return Err(Error::Index(format!(
                "row {i} out of range for {} rows",
                self.shape[0]
            )));
        }
        Ok(&self.values[i * d..(i + 1) * d])
    }

    /// Builds an r×d tensor from the given rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "select_rows() requires a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        let d = self.shape[1];
        let mut values = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            values.extend_from_slice(self.row(r)?);
        }
        Tensor::from_vec(vec![rows.len(), d], values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Tensor::max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
