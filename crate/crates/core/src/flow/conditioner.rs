//! Rectifier MLP mapping a condition vector to raw spline parameters.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct Dense<T> {
    /// `in x out`
    pub weight: Array2<T>,
    /// `1 x out`
    pub bias: Array2<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct ConditionerNet<T> {
    /// Fixed input standardisation, `(c - shift) / scale`. Not trained.
    pub input_shift: Vec<T>,
    pub input_scale: Vec<T>,
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> ConditionerNet<T> {
    /// Builds an MLP with the given hidden widths. Hidden layers use the usual
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation; the output layer
    /// starts at zero so the downstream spline starts at the identity.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                if l + 1 == n {
                    return Dense {
                        weight: Array2::zeros((fan_in, fan_out)),
                        bias: Array2::zeros((1, fan_out)),
                    };
                }
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut draw = || T::lit(rng.random_range(-bound..bound));
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw),
                    bias: Array2::from_shape_simple_fn((1, fan_out), &mut draw),
                }
            })
            .collect();
        Self {
            input_shift: vec![T::zero(); in_dim],
            input_scale: vec![T::one(); in_dim],
            layers,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    /// Sets the input standardisation from sample columns.
    pub fn standardize_inputs(&mut self, cond: ArrayView2<T>) {
        for j in 0..self.in_dim().min(cond.ncols()) {
            let col = cond.column(j);
            let n = T::from_usize(col.len().max(1)).unwrap();
            let mean = col.iter().fold(T::zero(), |a, b| a + *b) / n;
            let var = col.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) / n;
            self.input_shift[j] = mean;
            self.input_scale[j] = if var > T::lit(1e-12) { var.sqrt() } else { T::one() };
        }
    }

    /// Evaluates a batch of conditions (`rows x in_dim`).
    pub fn eval_batch(&self, cond: ArrayView2<T>) -> Result<Array2<T>> {
        if cond.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "conditioner expects {} inputs, got {}",
                self.in_dim(),
                cond.ncols()
            )));
        }
        let mut h = cond.to_owned();
        for ((mut col, s), c) in h.axis_iter_mut(Axis(1)).zip(&self.input_shift).zip(&self.input_scale) {
            col.mapv_inplace(|v| (v - *s) / *c);
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if l < last {
                h.mapv_inplace(|v| v.max(T::zero()));
            }
        }
        Ok(h)
    }

    /// Evaluates a single condition vector.
    pub fn eval(&self, cond: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, cond.len()), cond).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.eval_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}
