//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.

mod conv;
mod gradcheck;
mod graph;
mod norm;

pub use gradcheck::{central_difference, grad_check, relative_error, GradCheckReport};
pub use graph::{CustomOp, Graph, Var};
pub use norm::{BnMode, RunningStats, BN_MOMENTUM};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("dimension {axis} of shape {shape:?} is zero")]
    ZeroDim { axis: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge { kh: usize, kw: usize, h: usize, w: usize },
    #[error("{0}: stride must be positive")]
    ZeroStride(&'static str),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any tensor requiring grad")]
    NoGradPath,
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("batch_norm2d: train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("grad_check: function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("grad_check: eps must be positive")]
    BadEps,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill<T> {
    Constant(T),
    /// Uniform on `[lo, hi)`, reproducible from `seed`.
    Uniform {
        lo: T,
        hi: T,
        seed: u64,
    },
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroDim {
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Constant(v) => vec![v; n],
            Fill::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (lo, hi) = (lo.as_f64(), hi.as_f64());
                (0..n).map(|_| T::lit(lo + (hi - lo) * rng.random::<f64>())).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Constant(T::zero()))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access for optimizer updates.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fill() {
        let t = Tensor::<f64>::new(&[2, 2], Fill::Constant(0.0)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::new(&[3], Fill::Constant(1.5)).unwrap();
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_fill_is_seeded() {
        let f = Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor::<f64>::new(&[4], f).unwrap();
        let b = Tensor::<f64>::new(&[4], f).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let c = Tensor::<f64>::new(
            &[4],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(Tensor::<f64>::zeros(&[]).unwrap_err(), TensorError::EmptyShape);
        assert!(matches!(
            Tensor::<f64>::zeros(&[2, 0]).unwrap_err(),
            TensorError::ZeroDim { axis: 1, .. }
        ));
        assert!(matches!(
            Tensor::<f64>::from_vec(&[2], vec![1.0]).unwrap_err(),
            TensorError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn f32_tensors_work() {
        let t = Tensor::<f32>::new(
            &[3],
            Fill::Uniform {
                lo: 0.0,
                hi: 2.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(t.numel(), 3);
    }
}
