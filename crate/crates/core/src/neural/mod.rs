//! Trainable machinery shared by the span detector and the entity classifier:
//! a hashed-window token encoder with explicit gradients, flat parameter
//! vectors, AdamW with linear warm-up, first-order MAML and a central
//! finite-difference gradient checker.

mod checkpoint;
mod encoder;
mod gradcheck;
mod maml;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use encoder::{
    encode_tokens, hash_token, EncoderConfig, EncoderGrad, EncoderParams, EncoderTrace, EncoderView,
};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, GradCoordinate};
pub use maml::{maml_inner_update, maml_meta_step, LossFunctional, MetaOptimizer, MetaStepOutcome};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{NamedArray, ParamVector};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {value} at inner step {step}")]
    NonFiniteInner { step: usize, value: f64 },
    #[error("non-finite query loss {value} for episode {episode}")]
    NonFiniteQuery { episode: usize, value: f64 },
    #[error("meta batch is empty")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place log-softmax of a row.
pub fn log_softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|x| *x -= lse);
}
