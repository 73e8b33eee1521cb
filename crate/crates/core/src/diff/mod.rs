//! A small differentiation engine for the GCN pipeline.
//!
//! The operator family is closed: dense matmul, sparse weighted
//! propagation with degree normalization, ReLU, row log-softmax, masked
//! negative log-likelihood, elementwise arithmetic, norms and reductions.
//! Adjacency weights are differentiable inputs alongside parameters.

mod matrix;
mod program;
mod scalar;
mod sparse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matrix::Mat;
pub use program::{DiffProgram, NodeId, ProgramBuilder, Slot, SlotKind, Trace};
pub use scalar::{Dual, Scalar};
pub use sparse::SparsePattern;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("expected {expected} slot bindings, got {got}")]
    BindingCount { expected: usize, got: usize },
    #[error("slot `{slot}` expects shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        slot: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} cotangents, got {got}")]
    CotangentCount { expected: usize, got: usize },
    #[error("cotangent for output {output} expects shape {expected:?}, got {got:?}")]
    CotangentShape {
        output: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("tangent for slot `{slot}` expects shape {expected:?}, got {got:?}")]
    TangentShape {
        slot: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("finite differences need a scalar first output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("flat vector has length {got}, layout needs {expected}")]
    LayoutMismatch { expected: usize, got: usize },
}

/// Block structure of a flattened vector: named row-major blocks laid out
/// back to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl BlockLayout {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split<T: Scalar>(&self, flat: &[T]) -> Result<Vec<Mat<T>>, DiffError> {
        if flat.len() != self.len() {
            return Err(DiffError::LayoutMismatch {
                expected: self.len(),
                got: flat.len(),
            });
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut at = 0;
        for b in &self.blocks {
            let n = b.rows * b.cols;
            out.push(Mat::from_vec(b.rows, b.cols, flat[at..at + n].to_vec()));
            at += n;
        }
        Ok(out)
    }

    pub fn concat<T: Scalar>(&self, mats: &[Mat<T>]) -> Result<Vec<T>, DiffError> {
        let mut out = Vec::with_capacity(self.len());
        for (b, m) in self.blocks.iter().zip(mats) {
            if m.shape() != (b.rows, b.cols) {
                return Err(DiffError::ShapeMismatch {
                    slot: b.name.clone(),
                    expected: (b.rows, b.cols),
                    got: m.shape(),
                });
            }
            out.extend_from_slice(&m.data);
        }
        if mats.len() != self.blocks.len() {
            return Err(DiffError::LayoutMismatch {
                expected: self.len(),
                got: out.len(),
            });
        }
        Ok(out)
    }
}

/// Central-difference gradient of the program's first (scalar) output
/// with respect to one slot. Test oracle only.
pub fn finite_difference_gradient(
    program: &DiffProgram,
    bindings: &[Mat<f64>],
    slot: usize,
    step: f64,
) -> Result<Mat<f64>, DiffError> {
    let shape = program.output_shape(0);
    if shape != (1, 1) {
        return Err(DiffError::NonScalarOutput(shape));
    }
    let mut work = bindings.to_vec();
    let base = work[slot].clone();
    let mut grad = Mat::zeros(base.rows, base.cols);
    for k in 0..base.data.len() {
        work[slot].data[k] = base.data[k] + step;
        let up = program.evaluate(&work)?[0].as_scalar();
        work[slot].data[k] = base.data[k] - step;
        let down = program.evaluate(&work)?[0].as_scalar();
        work[slot].data[k] = base.data[k];
        grad.data[k] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Max relative error `|a - b| / max(|a|, |b|, floor)` over two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
