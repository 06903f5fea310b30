use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_n, Dataset, GroundTruthScm};
use crate::error::Result;

/// Scalar Markovian benchmark `v = x + (1 + x)(u + u^3 / 10)` with
/// `X ~ U(0, 2)` independent of `U ~ N(0, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Monotone;

/// Real root of `w = u + u^3 / 10`.
fn solve_cubic(w: f64) -> f64 {
    // u^3 + p u - q = 0 with p = 10, q = 10 w, one real root
    let (p, q) = (10.0f64, 10.0 * w.abs());
    let a = (q / 2.0 + (q * q / 4.0 + p * p * p / 27.0).sqrt()).cbrt();
    let mut u = a - p / (3.0 * a);
    // one Newton polish
    u -= (u + 0.1 * u * u * u - w.abs()) / (1.0 + 0.3 * u * u);
    u.copysign(w)
}

impl GroundTruthScm for Monotone {
    fn name(&self) -> String {
        "monotone".into()
    }

    fn x_dim(&self) -> usize {
        1
    }

    fn var_dim(&self) -> usize {
        1
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        check_n(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 1));
        let mut u = Array2::zeros((n, 1));
        let mut v = Array2::zeros((n, 1));
        for k in 0..n {
            let xk: f64 = rng.random_range(0.0..2.0);
            let uk: f64 = StandardNormal.sample(&mut rng);
            x[[k, 0]] = xk;
            u[[k, 0]] = uk;
            v[[k, 0]] = self.true_forward(&[xk], &[uk])[0];
        }
        Ok(Dataset {
            scm: self.name(),
            seed,
            i: None,
            z: None,
            x,
            v,
            u_hidden: Some(u),
        })
    }

    fn x_in_domain(&self, x: &[f64]) -> bool {
        x.len() == 1 && (0.0..=2.0).contains(&x[0])
    }

    fn true_forward(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (x, u) = (x[0], u[0]);
        vec![x + (1.0 + x) * (u + 0.1 * u * u * u)]
    }

    fn true_inverse(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let x = x[0];
        vec![solve_cubic((v[0] - x) / (1.0 + x))]
    }
}
