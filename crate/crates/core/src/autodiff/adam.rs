use ndarray::{Array2, Zip};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam optimiser state with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new(params: &[&Array2<T>], lr: f64) -> Self {
        let zeros: Vec<Array2<T>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [&mut Array2<T>], grads: &[Array2<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[k].dim() {
            return Err(Error::Shape(format!(
                "adam: parameter {k} is {:?}, gradient {:?}, moment {:?}",
                p.dim(),
                g.dim(),
                state.m[k].dim()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, g, m, v| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}
