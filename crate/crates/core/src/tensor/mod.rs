//! Dense NCHW tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value: a shape, an `f64` payload and an optional
//! gradient buffer. Differentiable computation happens on a [`Tape`], where
//! every operation on a [`Var`] records its inputs and a backward closure.
//! Calling [`Tape::backward`] walks the recorded nodes in reverse and returns
//! the accumulated [`Gradients`].

mod conv;
mod gradcheck;
mod ops;
mod snapshot;
mod tape;

pub use conv::{conv1d, gemm, ConvSpec};
pub use gradcheck::{grad_check, grad_check_many, GradReport, REL_ERR_FLOOR};
pub use snapshot::{read_snapshot, read_snapshot_from, write_snapshot, write_snapshot_to};
pub use tape::{BackwardFn, Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major array of rank 1 to 4.
///
/// Rank-4 tensors are interpreted as `(n, c, h, w)`. Channel vectors and
/// projection matrices use rank 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape("tensor", format!("rank {} unsupported", dims.len())));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} need {} values, got {}", dims, numel, data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor::new(dims, vec![value; numel]).expect("rank checked by caller")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).unwrap()
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = dims.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(dims, data).unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Returns `(n, c, h, w)`, or an error naming `op` if the tensor is not rank 4.
    pub fn nchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected NCHW input, got dims {:?}", self.dims),
            )),
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.dims, dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Element at `(n, c, h, w)`; panics when out of range or not rank 4.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cs, hs, ws) = self.nchw("at").unwrap();
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
