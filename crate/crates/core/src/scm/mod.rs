//! Synthetic structural causal models with closed-form mechanisms.
//!
//! Every generator records the exogenous draw of each row in `u_hidden`, so
//! counterfactual answers can be checked against the true mechanism.

mod abr;
mod counterexample;
mod dataset;
mod ellipse;
mod monotone;

pub use abr::{abr_throughput, abr_capacity, policy_bitrate, policy_ratio, AbrLike, AbrStructure, BITRATES, EXPLORATION, POLICIES};
pub use counterexample::{Counterexample, CounterexampleKind};
pub use dataset::{Dataset, Schema, DATASET_FORMAT, DATASET_VERSION};
pub use ellipse::{ellipse_true_counterfactual, Ellipse};
pub use monotone::Monotone;

use crate::error::{Error, Result};

/// A generator with a known mechanism `v = f(x, u)` that is bijective in `u`.
pub trait GroundTruthScm: Send + Sync {
    fn name(&self) -> String;

    /// Width of `x`.
    fn x_dim(&self) -> usize;

    /// Width of `u` and `v`.
    fn var_dim(&self) -> usize;

    /// `n` observational rows.
    fn sample(&self, n: usize, seed: u64) -> Result<Dataset>;

    fn x_in_domain(&self, x: &[f64]) -> bool;

    fn true_forward(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    fn true_inverse(&self, x: &[f64], v: &[f64]) -> Vec<f64>;

    /// `f(x', f^-1(x, v))`.
    fn true_counterfactual(&self, x: &[f64], v: &[f64], x_prime: &[f64]) -> Vec<f64> {
        self.true_forward(x_prime, &self.true_inverse(x, v))
    }
}

pub(crate) fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("a dataset needs at least one row".into()));
    }
    Ok(())
}

/// Names accepted by [`scm_by_name`].
pub const SCM_NAMES: [&str; 8] = [
    "ellipse",
    "counterexample-fstar",
    "counterexample-fhat",
    "monotone",
    "abr-markovian",
    "abr-iv",
    "abr-bc",
    "abr-ivbc",
];

pub fn scm_by_name(name: &str) -> Result<Box<dyn GroundTruthScm>> {
    Ok(match name {
        "ellipse" => Box::new(Ellipse),
        "counterexample-fstar" => Box::new(Counterexample(CounterexampleKind::FStar)),
        "counterexample-fhat" => Box::new(Counterexample(CounterexampleKind::FHat)),
        "monotone" => Box::new(Monotone),
        "abr-markovian" => Box::new(AbrLike(AbrStructure::Markovian)),
        "abr-iv" => Box::new(AbrLike(AbrStructure::Iv)),
        "abr-bc" => Box::new(AbrLike(AbrStructure::Bc)),
        "abr-ivbc" => Box::new(AbrLike(AbrStructure::Ivbc)),
        _ => {
            return Err(Error::Unknown {
                kind: "scm",
                name: name.into(),
                valid: SCM_NAMES.join(", "),
            })
        }
    })
}

/// Samples under `do(X = x_fixed)`: every other variable keeps its
/// observational draw, `x` becomes constant and `v` is recomputed.
pub fn sample_interventional(scm: &dyn GroundTruthScm, x_fixed: &[f64], n: usize, seed: u64) -> Result<Dataset> {
    if x_fixed.len() != scm.x_dim() || !scm.x_in_domain(x_fixed) {
        return Err(Error::InvalidArgument(format!(
            "x = {x_fixed:?} is outside the domain of `{}`",
            scm.name()
        )));
    }
    let mut ds = scm.sample(n, seed)?;
    let u = ds.hidden_u()?.clone();
    for (mut xr, (mut vr, ur)) in ds.x.rows_mut().into_iter().zip(ds.v.rows_mut().into_iter().zip(u.rows())) {
        for (t, s) in xr.iter_mut().zip(x_fixed) {
            *t = *s;
        }
        let v = scm.true_forward(x_fixed, ur.as_slice().expect("row-major"));
        for (t, s) in vr.iter_mut().zip(v) {
            *t = s;
        }
    }
    ds.scm = format!("{}@do(x={x_fixed:?})", ds.scm);
    Ok(ds)
}

/// Rows with `x` permuted across the dataset and `v` recomputed from the
/// hidden `u`: the result has the same marginals of `x` and `u` but `x` is
/// independent of everything else.
pub fn shuffle_x(scm: &dyn GroundTruthScm, ds: &Dataset, seed: u64) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let u = ds.hidden_u()?;
    let mut perm: Vec<usize> = (0..ds.n()).collect();
    perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut out = ds.clone();
    out.x = ds.x.select(ndarray::Axis(0), &perm);
    for (k, mut vr) in out.v.rows_mut().into_iter().enumerate() {
        let v = scm.true_forward(out.x.row(k).as_slice().expect("row-major"), u.row(k).as_slice().expect("row-major"));
        for (t, s) in vr.iter_mut().zip(v) {
            *t = s;
        }
    }
    out.scm = format!("{}-shuffled-x", ds.scm);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_consistency_and_involution() {
        for name in SCM_NAMES {
            let scm = scm_by_name(name).unwrap();
            let ds = scm.sample(20_000, 5).unwrap();
            let u = ds.hidden_u().unwrap();
            let mut worst = 0.0f64;
            for k in 0..ds.n() {
                let x = ds.x.row(k).to_vec();
                let uk = u.row(k).to_vec();
                let v = scm.true_forward(&x, &uk);
                assert_eq!(v, ds.v.row(k).to_vec(), "{name}: stored v differs from the mechanism");
                let back = scm.true_inverse(&x, &v);
                for (a, b) in back.iter().zip(&uk) {
                    worst = worst.max((a - b).abs() / b.abs().max(1.0));
                }
                // involution through a different x
                let other = ds.x.row((k + 1) % ds.n()).to_vec();
                let vp = scm.true_counterfactual(&x, &v, &other);
                let again = scm.true_counterfactual(&other, &vp, &x);
                for (a, b) in again.iter().zip(&v) {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{name}: involution {a} vs {b}");
                }
                assert_eq!(scm.true_counterfactual(&x, &v, &x).len(), v.len());
            }
            // the throughput curve flattens for large capacity, so its inverse
            // amplifies the rounding of v
            let tol = if name.starts_with("abr") { 1e-9 } else { 4.0 * f64::EPSILON };
            assert!(worst <= tol, "{name}: inverse error {worst}");
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        for name in SCM_NAMES {
            let scm = scm_by_name(name).unwrap();
            assert_eq!(scm.sample(500, 9).unwrap(), scm.sample(500, 9).unwrap());
            assert_ne!(scm.sample(500, 9).unwrap().v, scm.sample(500, 10).unwrap().v);
        }
    }

    #[test]
    fn unknown_name_lists_valid_names() {
        match scm_by_name("spiral") {
            Err(Error::Unknown { valid, .. }) => assert!(valid.contains("ellipse") && valid.contains("abr-ivbc")),
            other => panic!("{:?}", other.err()),
        }
        assert!(Ellipse.sample(0, 1).is_err());
    }

    #[test]
    fn interventional_ellipse() {
        let x = std::f64::consts::FRAC_PI_2;
        let ds = sample_interventional(&Ellipse, &[x], 2000, 3).unwrap();
        let u = ds.u_hidden.as_ref().unwrap();
        for k in 0..ds.n() {
            assert_eq!(ds.x[[k, 0]], x);
            let lhs = ds.v[[k, 0]] / ds.v[[k, 1]];
            let rhs = 1.5 * u[[k, 0]] / u[[k, 1]];
            assert!((lhs - rhs).abs() < 1e-12 * rhs);
        }
        assert!(sample_interventional(&AbrLike(AbrStructure::Markovian), &[0.5], 10, 0).is_err());
    }

    #[test]
    fn interventional_abr_matches_markovian_conditional() {
        let scm = AbrLike(AbrStructure::Markovian);
        let x = BITRATES[2];
        let obs = scm.sample(50_000, 1).unwrap();
        let cond: Vec<f64> = (0..obs.n()).filter(|k| obs.x[[*k, 0]] == x).map(|k| obs.v[[k, 0]]).collect();
        let int = sample_interventional(&scm, &[x], 10_000, 2).unwrap();
        let dov: Vec<f64> = int.v.column(0).to_vec();
        let ks = crate::diagnostics::ks_two_sample(&cond, &dov).unwrap();
        assert!(ks.p_value > 0.01, "KS p {}", ks.p_value);
    }

    #[test]
    fn shuffled_x_is_markovian() {
        let ds = Ellipse.sample(3000, 4).unwrap();
        let sh = shuffle_x(&Ellipse, &ds, 5).unwrap();
        let u = sh.u_hidden.as_ref().unwrap();
        for k in 0..sh.n() {
            let v = Ellipse.true_forward(&[sh.x[[k, 0]]], &[u[[k, 0]], u[[k, 1]]]);
            assert_eq!(v, sh.v.row(k).to_vec());
        }
        let mut a = ds.x.column(0).to_vec();
        let mut b = sh.x.column(0).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
}
