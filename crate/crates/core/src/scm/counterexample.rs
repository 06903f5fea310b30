use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_n, Dataset, GroundTruthScm};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CounterexampleKind {
    /// `v = u` if `x = 1`, else `u - 1`.
    FStar,
    /// `v = u` if `x = 1`, else `-u`.
    FHat,
}

/// Two mechanisms with identical observational distributions
/// (`X ~ Bern(1/2)`, `U ~ U(0, 1)`, `V | X = 0 ~ U(-1, 0)`) but different
/// counterfactuals.
#[derive(Clone, Copy, Debug)]
pub struct Counterexample(pub CounterexampleKind);

impl GroundTruthScm for Counterexample {
    fn name(&self) -> String {
        match self.0 {
            CounterexampleKind::FStar => "counterexample-fstar".into(),
            CounterexampleKind::FHat => "counterexample-fhat".into(),
        }
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
            let xk = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let uk: f64 = rng.random();
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
        x.len() == 1 && (x[0] == 0.0 || x[0] == 1.0)
    }

    fn true_forward(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let v = match (x[0] == 1.0, self.0) {
            (true, _) => u[0],
            (false, CounterexampleKind::FStar) => u[0] - 1.0,
            (false, CounterexampleKind::FHat) => -u[0],
        };
        vec![v]
    }

    fn true_inverse(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let u = match (x[0] == 1.0, self.0) {
            (true, _) => v[0],
            (false, CounterexampleKind::FStar) => v[0] + 1.0,
            (false, CounterexampleKind::FHat) => -v[0],
        };
        vec![u]
    }
}
