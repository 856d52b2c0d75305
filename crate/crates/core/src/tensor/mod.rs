//! Dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! Everything learnable in the toolkit is built from the primitive op set in
//! [`tape`]: matrix multiply, valid 1-D cross-correlation, broadcasting
//! elementwise arithmetic, tanh/sigmoid/ln/sqrt, axis reductions, L2 norms,
//! shape movement (reshape/permute/slice/concat/expand) and the two framing
//! scatter ops (overlap-add, chunk segment/merge). Gradients of every
//! primitive are verified against central finite differences in [`gradcheck`].
//!
//! Storage is 64-bit: NCC normalizations and finite-difference checks are
//! fragile at f32. Forward ops reject non-finite outputs instead of letting
//! NaN propagate.

mod shape;

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use shape::{broadcast_shapes, strides_for};
pub use tape::{Tape, Var};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedVar,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major tensor. A plain value: freely clonable and `Send`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Uniform samples in [lo, hi) from a seeded stream.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Standard-normal samples (Box-Muller) from a seeded stream.
    pub fn randn(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos());
            if data.len() < numel {
                data.push(r * theta.sin());
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the shape without touching data. Element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value of a rank-anything tensor holding exactly one element.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Orthogonal square matrix via modified Gram-Schmidt on a seeded Gaussian
/// draw. Used for recurrent weight initialization.
pub fn orthogonal(n: usize, seed: u64) -> Tensor {
    let mut m = Tensor::randn(&[n, n], seed).into_data();
    for i in 0..n {
        // Two MGS passes keep the columns orthogonal to fp precision.
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..n).map(|r| m[r * n + i] * m[r * n + j]).sum();
                for r in 0..n {
                    m[r * n + i] -= dot * m[r * n + j];
                }
            }
        }
        let norm: f64 = (0..n).map(|r| m[r * n + i] * m[r * n + i]).sum::<f64>().sqrt();
        // A zero column from a Gaussian draw is measure-zero; fall back to a basis vector.
        if norm < 1e-12 {
            for r in 0..n {
                m[r * n + i] = if r == i { 1.0 } else { 0.0 };
            }
        } else {
            for r in 0..n {
                m[r * n + i] /= norm;
            }
        }
    }
    Tensor { shape: vec![n, n], data: m }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&[32], 7);
        let b = Tensor::randn(&[32], 7);
        assert_eq!(a, b);
        let c = Tensor::randn(&[32], 8);
        assert_ne!(a, c);
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let n = 16;
        let q = orthogonal(n, 3);
        let d = q.data();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|r| d[r * n + i] * d[r * n + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "col {i}·col {j} = {dot}");
            }
        }
    }
}
