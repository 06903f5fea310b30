use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::{check_n, Dataset, GroundTruthScm};
use crate::error::Result;

/// Two-dimensional backdoor benchmark: a point on an axis-aligned ellipse
/// whose semi-axes are the exogenous `u` and whose angle is `x`.
///
/// `Z ~ U(-1/2, 1/2)` confounds both the angle and the ellipse size; given
/// `Z`, `U` and `X` are independent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Ellipse;

fn factors(x: f64) -> (f64, f64) {
    (2.0 + x.sin(), 2.0 + x.cos())
}

/// `v' = (u0 (2 + sin x'), u1 (2 + cos x'))` with `u` abducted from `(x, v)`.
pub fn ellipse_true_counterfactual(x: f64, v: [f64; 2], x_prime: f64) -> [f64; 2] {
    let (a, b) = factors(x);
    let (ap, bp) = factors(x_prime);
    [v[0] / a * ap, v[1] / b * bp]
}

impl GroundTruthScm for Ellipse {
    fn name(&self) -> String {
        "ellipse".into()
    }

    fn x_dim(&self) -> usize {
        1
    }

    fn var_dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        check_n(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Array2::zeros((n, 1));
        let mut x = Array2::zeros((n, 1));
        let mut u = Array2::zeros((n, 2));
        let mut v = Array2::zeros((n, 2));
        for k in 0..n {
            let zk: f64 = rng.random_range(-0.5..0.5);
            let eps_x: f64 = StandardNormal.sample(&mut rng);
            let xk = (1.442_548_43 * zk + 0.597_019_23 + eps_x).rem_euclid(TAU);
            // Beta(1, 1) is U(0, 1)
            let eps_u0: f64 = rng.random();
            let eps_u1: f64 = Exp1.sample(&mut rng);
            let u0 = (1.649_852_74 * zk + 0.265_613_1).exp() + eps_u0;
            let u1 = u0 * (1.0 + eps_u1 * (1.613_233_58 * zk - 0.180_702_37).exp());
            let vk = self.true_forward(&[xk], &[u0, u1]);
            z[[k, 0]] = zk;
            x[[k, 0]] = xk;
            u[[k, 0]] = u0;
            u[[k, 1]] = u1;
            v[[k, 0]] = vk[0];
            v[[k, 1]] = vk[1];
        }
        Ok(Dataset {
            scm: self.name(),
            seed,
            i: None,
            z: Some(z),
            x,
            v,
            u_hidden: Some(u),
        })
    }

    fn x_in_domain(&self, x: &[f64]) -> bool {
        x.len() == 1 && x[0].is_finite()
    }

    fn true_forward(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (a, b) = factors(x[0]);
        vec![u[0] * a, u[1] * b]
    }

    fn true_inverse(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let (a, b) = factors(x[0]);
        vec![v[0] / a, v[1] / b]
    }

    fn true_counterfactual(&self, x: &[f64], v: &[f64], x_prime: &[f64]) -> Vec<f64> {
        ellipse_true_counterfactual(x[0], [v[0], v[1]], x_prime[0]).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn closed_form_points() {
        assert_eq!(Ellipse.true_forward(&[FRAC_PI_2], &[1.0, 1.0]), vec![3.0, 2.0]);
        let vp = ellipse_true_counterfactual(FRAC_PI_2, [3.0, 2.0], 3.0 * FRAC_PI_2);
        assert!((vp[0] - 1.0).abs() < 1e-15 && (vp[1] - 2.0).abs() < 1e-15);
        assert_eq!(ellipse_true_counterfactual(1.3, [2.5, 4.0], 1.3), [2.5, 4.0]);
    }

    #[test]
    fn sweep_traces_the_ellipse() {
        let (x, v) = (0.8, [2.7, 3.1]);
        let u = Ellipse.true_inverse(&[x], &v);
        for k in 1..64 {
            let xp = TAU * k as f64 / 64.0;
            let vp = ellipse_true_counterfactual(x, v, xp);
            // (v0/u0 - 2)^2 + (v1/u1 - 2)^2 = sin^2 + cos^2
            let r = (vp[0] / u[0] - 2.0).powi(2) + (vp[1] / u[1] - 2.0).powi(2);
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn support_and_moments() {
        let n = 1_000_000;
        let ds = Ellipse.sample(n, 11).unwrap();
        let u = ds.u_hidden.as_ref().unwrap();
        for k in 0..n {
            assert!(u[[k, 0]] > 0.0 && u[[k, 1]] >= u[[k, 0]]);
            assert!((0.0..TAU).contains(&ds.x[[k, 0]]));
        }
        let z = ds.z.as_ref().unwrap();
        let mean = z.sum() / n as f64;
        // sd of U(-1/2, 1/2) is 1/sqrt(12)
        assert!(mean.abs() < 3.0 / (12.0f64).sqrt() / (n as f64).sqrt());
        assert!(ds.x.iter().any(|t| *t > PI));
    }
}
