//! Minimal deterministic differentiable computation substrate.
//!
//! Exactly the operations the encoder and task heads need, on 64-bit
//! floats: matrix multiply, additions and broadcasts, GELU, layer
//! normalization, softmax, dropout, embedding lookup, concatenation and
//! slicing, scalar scaling, a fused scalar layer mixture, and
//! label-smoothed cross entropy. Gradients are exact reverse-mode
//! derivatives, checkable against central finite differences.
//!
//! Shape violations are programming errors and panic with both shapes in
//! the message; data and IO problems return errors.

mod checkpoint;
mod graph;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use graph::{central_difference_gradients, max_relative_error, Graph, Var};
pub use optim::{clip_gradients, Adam, ParamGroup, ParamId, ParamStore, Parameter};

use rand::Rng;

/// A dense row-major tensor of 64-bit floats. Rank 0 (scalars), 1
/// (vectors), and 2 (matrices) are used throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not hold {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| standard_normal(rng) * std)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.shape.is_empty(),
            "item() on a non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Rows of a matrix (or entries of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(
            self.shape, other.shape,
            "add_assign shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Squared L2 norm of all elements.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Box-Muller standard normal draw. Two uniforms per call keeps the
/// consumption pattern independent of the values drawn.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
