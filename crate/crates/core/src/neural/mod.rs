//! A small gradient engine: constant-modulus probing layers, the power and
//! input-scaling layers, ReLU/softmax MLPs, cross-entropy losses, Adam,
//! finite-difference checking and the BFNN checkpoint format.
//!
//! There is no general tape: each layer's `forward` returns a typed cache
//! that its `backward` consumes, so backward-before-forward cannot be
//! expressed.

mod adam;
mod check;
mod checkpoint;
mod loss;
mod mlp;
mod probing;

pub use adam::{Adam, AdamConfig};
pub use check::finite_diff_check;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{ce_loss, softmax, weighted_ce_loss, LossOutput};
pub use mlp::{Dense, Mlp, MlpCache};
pub use probing::{
    power_backward, power_layer, InputScaling, ProbeCache, Prober, ProbingLayer, ProbingPair, ScaleCache,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("xi must lie in [0, 1], got {0}")]
    Xi(f64),
    #[error("optimizer state does not match the parameter list")]
    OptimizerMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn shape_err(what: &'static str, expected: &[usize], got: &[usize]) -> NeuralError {
    NeuralError::Shape {
        what,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
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
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(shape_err("matrix data", &[rows * cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    /// Stacks rows `idx` of `self`.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `[self | other]` column concatenation.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            let r = out.row_mut(i);
            r[..self.cols].copy_from_slice(self.row(i));
            r[self.cols..].copy_from_slice(other.row(i));
        }
        out
    }

    /// Splits columns at `at`.
    pub fn hsplit(&self, at: usize) -> (Matrix, Matrix) {
        let mut a = Matrix::zeros(self.rows, at);
        let mut b = Matrix::zeros(self.rows, self.cols - at);
        for i in 0..self.rows {
            a.row_mut(i).copy_from_slice(&self.row(i)[..at]);
            b.row_mut(i).copy_from_slice(&self.row(i)[at..]);
        }
        (a, b)
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub values: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, values: Matrix) -> Self {
        let grad = Matrix::zeros(values.rows, values.cols);
        Self {
            name: name.into(),
            values,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.values.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.data.is_empty()
    }

    pub(crate) fn normal<R: Rng + ?Sized>(name: &str, rows: usize, cols: usize, sd: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, sd).expect("positive sd");
        let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
        Param::new(name, Matrix { rows, cols, data })
    }
}

/// Parameter groups expose their tensors in a fixed order for optimizers,
/// checkpoints and gradient checks.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All values concatenated.
    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.values.data.iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.data.iter().copied()).collect()
    }

    fn set_flat_values(&mut self, flat: &[f64]) {
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.values.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}
