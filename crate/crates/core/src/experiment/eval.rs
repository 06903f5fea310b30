use std::f64::consts::TAU;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::AbrTarget;
use super::model::TrainedModel;
use crate::error::{Error, Result};
use crate::scm::{Dataset, GroundTruthScm, BITRATES};

/// Denominator floor of the percentage error.
pub const MAPE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemeMetrics {
    pub scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent, of the first (evaluated) scheme.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape: Option<f64>,
    /// Percent of the replay baseline's error, of the first scheme.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_mse: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub schemes: Vec<SchemeMetrics>,
}

/// `k` treatments spread evenly over `(0, 2 pi)`.
pub fn angle_sweep(k: usize) -> Vec<f64> {
    (0..k).map(|j| TAU * (j as f64 + 0.5) / k as f64).collect()
}

/// Mean absolute percentage error of the model's counterfactuals against the
/// generating mechanism, over every held-out row, treatment in `grid` and
/// outcome coordinate.
pub fn sweep_mape(model: &TrainedModel, scm: &dyn GroundTruthScm, heldout: &Dataset, grid: &[f64]) -> Result<f64> {
    sweep_mape_with(scm, heldout, grid, |x_prime, _| model.counterfactual(heldout, x_prime))
}

/// Like [`sweep_mape`], but the prediction ignores the evidence outcome and
/// is a fresh draw from the model's conditional at the new treatment.
pub fn sampled_sweep_mape(
    model: &TrainedModel,
    scm: &dyn GroundTruthScm,
    heldout: &Dataset,
    grid: &[f64],
    seed: u64,
) -> Result<f64> {
    sweep_mape_with(scm, heldout, grid, |x_prime, j| {
        model.sample_conditional(heldout, x_prime, seed.wrapping_add(j as u64))
    })
}

fn sweep_mape_with(
    scm: &dyn GroundTruthScm,
    heldout: &Dataset,
    grid: &[f64],
    predict: impl Fn(ArrayView2<f64>, usize) -> Result<Array2<f64>>,
) -> Result<f64> {
    let u = heldout.hidden_u()?;
    if grid.is_empty() || heldout.n() == 0 {
        return Err(Error::InvalidArgument("MAPE needs held-out rows and at least one treatment".into()));
    }
    let n = heldout.n();
    let (mut total, mut count) = (0.0, 0usize);
    for (j, &xp) in grid.iter().enumerate() {
        let x_prime = Array2::from_elem((n, 1), xp);
        let pred = predict(x_prime.view(), j)?;
        for r in 0..n {
            let truth = scm.true_forward(&[xp], u.row(r).as_slice().expect("row-major"));
            for (p, t) in pred.row(r).iter().zip(&truth) {
                total += (p - t).abs() / t.abs().max(MAPE_FLOOR);
                count += 1;
            }
        }
    }
    Ok(100.0 * total / count as f64)
}

/// Counterfactual bitrates for the held-out rows.
pub fn abr_targets(target: &AbrTarget, n: usize, seed: u64) -> Array2<f64> {
    match target {
        AbrTarget::Fixed { bitrate } => Array2::from_elem((n, 1), *bitrate),
        AbrTarget::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_simple_fn((n, 1), || BITRATES[rng.random_range(0..BITRATES.len())])
        }
    }
}

/// `(normalized MSE %, model MSE, replay MSE)`: the replay baseline predicts
/// that throughput does not depend on the bitrate (`v' = v`).
pub fn abr_normalized_mse(
    model: &TrainedModel,
    scm: &dyn GroundTruthScm,
    heldout: &Dataset,
    target: &AbrTarget,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let u = heldout.hidden_u()?;
    let n = heldout.n();
    let x_prime = abr_targets(target, n, seed);
    let pred = model.counterfactual(heldout, x_prime.view())?;
    let (mut se_model, mut se_replay) = (0.0, 0.0);
    for r in 0..n {
        let truth = scm.true_forward(&[x_prime[[r, 0]]], &[u[[r, 0]]])[0];
        se_model += (pred[[r, 0]] - truth).powi(2);
        se_replay += (heldout.v[[r, 0]] - truth).powi(2);
    }
    if se_replay <= 0.0 {
        return Err(Error::InvalidArgument(
            "the replay baseline is exact on these queries; normalized MSE is undefined".into(),
        ));
    }
    Ok((100.0 * se_model / se_replay, se_model / n as f64, se_replay / n as f64))
}
