//! Dense row-major tensors of 64-bit reals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::Shape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    LengthMismatch { shape: Shape, expected: usize, got: usize },
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { data: vec![0.0; shape.numel()], shape }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor { data: vec![v; shape.numel()], shape }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Comparison used throughout the tests: shapes equal and every element pair
/// within `rel_tol` of each other under `|x - y| <= rel_tol * max(1, |x|, |y|)`.
/// Non-finite values compare equal only when both sides agree (NaN with NaN,
/// same-signed infinities).
pub fn approx_eq(a: &Tensor, b: &Tensor, rel_tol: f64) -> bool {
    if a.shape != b.shape {
        return false;
    }
    a.data.iter().zip(&b.data).all(|(&x, &y)| scalar_approx_eq(x, y, rel_tol))
}

pub fn scalar_approx_eq(x: f64, y: f64, rel_tol: f64) -> bool {
    if x.is_nan() || y.is_nan() {
        return x.is_nan() && y.is_nan();
    }
    if x.is_infinite() || y.is_infinite() {
        return x == y;
    }
    (x - y).abs() <= rel_tol * x.abs().max(y.abs()).max(1.0)
}
