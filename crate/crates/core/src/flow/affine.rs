use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Per-coordinate `v = scale * u + shift` with `scale = exp(log_scale) > 0`.
///
/// Used at the input and output of every flow to move the bulk of the data
/// into the spline's `[-B, B]` window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct AffineCalibration<T> {
    /// `1 x d` row of log scales.
    pub log_scale: Array2<T>,
    /// `1 x d` row of shifts.
    pub shift: Array2<T>,
}

impl<T: Real> AffineCalibration<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            log_scale: Array2::zeros((1, dim)),
            shift: Array2::zeros((1, dim)),
        }
    }

    pub fn new(scale: &[T], shift: &[T]) -> Self {
        assert_eq!(scale.len(), shift.len());
        let d = scale.len();
        Self {
            log_scale: Array2::from_shape_fn((1, d), |(_, j)| scale[j].ln()),
            shift: Array2::from_shape_fn((1, d), |(_, j)| shift[j]),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.ncols()
    }

    pub fn scale(&self, j: usize) -> T {
        self.log_scale[[0, j]].exp()
    }

    pub fn log_det(&self) -> T {
        self.log_scale.iter().fold(T::zero(), |a, b| a + *b)
    }

    pub fn forward(&self, u: T, j: usize) -> T {
        self.scale(j) * u + self.shift[[0, j]]
    }

    pub fn inverse(&self, v: T, j: usize) -> T {
        (v - self.shift[[0, j]]) / self.scale(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form() {
        let a = AffineCalibration::new(&[2.0f64], &[1.0]);
        assert!((a.forward(2.0, 0) - 5.0).abs() < 1e-15);
        assert!((a.inverse(5.0, 0) - 2.0).abs() < 1e-15);
        assert!((a.log_det() - 2f64.ln()).abs() < 1e-15);
    }
}
