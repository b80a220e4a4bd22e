//! Dense row-major f32 tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is plain data. Differentiable computation goes through a
//! [`graph::Graph`], an append-only arena of eagerly evaluated nodes; calling
//! [`graph::Graph::backward`] on a scalar fills gradient buffers for every
//! tracked node. All kernels are single-threaded and accumulate in a fixed
//! order, so identical inputs give bit-identical outputs.

pub mod graph;
pub mod kernels;

pub use graph::{Graph, Var};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Data length does not match the product of the dimensions.
    ShapeData { shape: Vec<usize>, data_len: usize },
    /// Operand shapes are incompatible for the named op.
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Operand rank unsupported by the named op.
    Rank { op: &'static str, shape: Vec<usize> },
    /// Axis out of range for the operand.
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    /// Slice bounds escape the operand.
    SliceBounds {
        start: Vec<usize>,
        end: Vec<usize>,
        shape: Vec<usize>,
    },
    /// `backward` needs a scalar loss.
    NotScalar { shape: Vec<usize> },
    /// Rotary embedding needs an even head dimension.
    OddRotaryDim { dim: usize },
    /// Embedding lookup hit an id outside the table.
    BadTokenId { id: u32, vocab: usize },
    /// `backward` called on a graph built in inference mode.
    GradDisabled,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeData { shape, data_len } => {
                write!(f, "shape {shape:?} wants {} values, got {data_len}", shape.iter().product::<usize>())
            }
            Self::Mismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::Rank { op, shape } => write!(f, "{op}: unsupported rank for shape {shape:?}"),
            Self::Axis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} out of range for shape {shape:?}")
            }
            Self::SliceBounds { start, end, shape } => {
                write!(f, "slice {start:?}..{end:?} escapes shape {shape:?}")
            }
            Self::NotScalar { shape } => write!(f, "loss must be scalar, got shape {shape:?}"),
            Self::OddRotaryDim { dim } => write!(f, "rotary dimension must be even, got {dim}"),
            Self::BadTokenId { id, vocab } => write!(f, "token id {id} outside vocab of {vocab}"),
            Self::GradDisabled => write!(f, "graph was built with gradients disabled"),
        }
    }
}

impl core::error::Error for TensorError {}

/// Dense row-major array of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor; rank-1 counts as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            [] => (1, 1),
            other => {
                let c = *other.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
