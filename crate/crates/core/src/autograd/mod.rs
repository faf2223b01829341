//! Tape-based reverse-mode differentiation over `N x C x H x W` tensors.
//!
//! The op set is closed: it holds exactly what the depth network and its loss
//! need, each op with a hand-written adjoint. Every op rejects non-finite
//! values.

mod gradcheck;
mod graph;
mod io;
pub mod ops;
mod optim;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var};
pub use io::{load_weights, save_weights, WeightFile};
pub use ops::{DistanceKind, PoolIndices};
pub use optim::{adam_step, lr_at_epoch, sgd_step, AdamParams, AdamState};

use thiserror::Error;

/// Training precision. Weight files always store 32-bit floats.
pub type Real = f64;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("pool index {index} outside output plane of {plane} elements")]
    BadIndices { index: usize, plane: usize },

    #[error("loss must be a single value, got shape {0:?}")]
    NotScalarLoss([usize; 4]),

    #[error("no valid pixels in masked distance")]
    NoValidPixels,

    #[error("weight file {path}: {message}")]
    WeightFile { path: String, message: String },
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::ShapeMismatch { op, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<Real>) -> Result<Self, AutogradError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("tensor", format!("{shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], v: Real) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: Real) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        self.data[self.index(n, c, y, x)]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One `H x W` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[Real] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }
}
