//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! The engine is a classic arena tape: every forward operation appends a
//! node holding its result plus the information needed for its
//! vector-Jacobian product, and [`Tape::backward`] replays the nodes in
//! reverse, accumulating gradients. Tensors are row-major `Vec<f64>`
//! buffers with explicit shapes; rank never exceeds 3 in this codebase
//! (1-d signals, `[channels, time]` feature maps, `[out, in, k]` conv
//! kernels).
//!
//! All arithmetic is f64. Checkpoints store f32 (see `train::checkpoint`),
//! so loading a checkpoint widens exactly and re-saving it is lossless.

pub(crate) mod kernels;
mod tape;

pub mod gradcheck;

pub use tape::{Padding, Tape, Var, RMS_NORM_EPS};


use std::collections::BTreeMap;
use thiserror::Error;

/// Stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid_scalar(x)
}

/// Stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    tape::softplus_scalar(x)
}

/// Inverse softplus for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    tape::softplus_inv_scalar(y)
}

/// Name → tape-handle registry for model parameters.
///
/// Binding a parameter struct to a tape records `(name, Var)` pairs here;
/// after `backward`, [`VarRegistry::collect_grads`] gathers the gradients
/// keyed by parameter name (zeros for parameters the loss never reached).
#[derive(Debug, Default)]
pub struct VarRegistry {
    entries: Vec<(String, Var)>,
}

impl VarRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    /// Gradients by parameter name. Call after `Tape::backward`.
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(name, var)| (name.clone(), tape.grad_or_zeros(*var)))
            .collect()
    }
}

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Element count does not match the product of the shape dimensions.
    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    /// Two operands that must agree in shape do not.
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operand has the wrong rank or an otherwise unusable shape.
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadOperand {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    /// Reduction or pooling parameters that cannot be applied to the shape.
    #[error("{op}: invalid arguments ({detail}) for shape {shape:?}")]
    BadArgument {
        op: &'static str,
        detail: String,
        shape: Vec<usize>,
    },
    /// `backward` was called on a non-scalar value.
    #[error("backward requires a scalar (1-element) loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    /// `backward` was called twice on the same tape.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

/// A dense row-major f64 tensor.
///
/// `grad` is populated by [`Tape::grad_of`] convenience copies; the tape
/// itself owns gradient accumulation during backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
                expected,
            });
        }
        Ok(Self {
            data,
            shape: shape.to_vec(),
            requires_grad: false,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            requires_grad: false,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            data: vec![value],
            shape: vec![1],
            requires_grad: false,
        }
    }

    /// 1-d tensor wrapping a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            shape: vec![values.len()],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf and returns it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length_against_shape() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape, vec![2, 3]);

        let err = Tensor::new(vec![1.0, 2.0], &[2, 3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LengthMismatch {
                len: 2,
                shape: vec![2, 3],
                expected: 6
            }
        );
    }

    #[test]
    fn scalar_and_zeros_shapes() {
        assert_eq!(Tensor::scalar(2.5).shape, vec![1]);
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(z.numel(), 12);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }
}
