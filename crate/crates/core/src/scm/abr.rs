use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::{check_n, Dataset, GroundTruthScm};
use crate::error::Result;

/// Bitrate ladder available to every policy.
pub const BITRATES: [f64; 5] = [0.3, 0.75, 1.2, 1.85, 2.85];
/// Number of logged policies (instrument values `1..=POLICIES`).
pub const POLICIES: usize = 10;
/// Probability that a policy picks a uniformly random bitrate instead.
pub const EXPLORATION: f64 = 0.2;

/// Which confounding the logged data carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbrStructure {
    /// Bitrates drawn uniformly, independent of capacity.
    Markovian,
    /// Ten policies (the instrument) choose from an unobserved buffer level.
    Iv,
    /// One policy chooses from the observed buffer level.
    Bc,
    /// Ten policies choose from the observed buffer level.
    Ivbc,
}

/// Video-streaming stand-in: latent capacity `U ~ LogNormal(0, 1/4)`, buffer
/// `Z = ln U + N(0, 0.09)`, bitrate `X` from a buffer-threshold policy,
/// throughput `V = U (1 - exp(-X / U))`.
#[derive(Clone, Copy, Debug)]
pub struct AbrLike(pub AbrStructure);

/// Throughput at bitrate `x` and capacity `u`; strictly increasing in `u`
/// with derivative `1 - (1 + t) e^-t`, `t = x / u`, and saturating at `min(x, u)`.
pub fn abr_throughput(x: f64, u: f64) -> f64 {
    -u * (-x / u).exp_m1()
}

/// Capacity that produces throughput `v` at bitrate `x`; `NaN` unless `0 < v < x`.
pub fn abr_capacity(x: f64, v: f64) -> f64 {
    if !(v > 0.0 && v < x) {
        return f64::NAN;
    }
    let mut lo = v;
    let mut hi = 2.0 * v.max(x);
    while abr_throughput(x, hi) < v {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::NAN;
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if abr_throughput(x, mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (abr_throughput(x, lo) - v).abs() <= (abr_throughput(x, hi) - v).abs() {
        lo
    } else {
        hi
    }
}

/// Target-to-buffer ratio of policy `k` in `1..=POLICIES`, geometric from 0.35 to 3.
pub fn policy_ratio(k: usize) -> f64 {
    let s = (k.clamp(1, POLICIES) - 1) as f64 / (POLICIES - 1) as f64;
    0.35 * (3.0f64 / 0.35).powf(s)
}

/// Highest ladder bitrate not above `ratio * exp(z)`, or the lowest one.
pub fn policy_bitrate(ratio: f64, z: f64) -> f64 {
    let target = ratio * z.exp();
    BITRATES.iter().rev().copied().find(|b| *b <= target).unwrap_or(BITRATES[0])
}

impl AbrLike {
    fn has_instrument(&self) -> bool {
        matches!(self.0, AbrStructure::Iv | AbrStructure::Ivbc)
    }

    fn observes_buffer(&self) -> bool {
        matches!(self.0, AbrStructure::Bc | AbrStructure::Ivbc)
    }
}

impl GroundTruthScm for AbrLike {
    fn name(&self) -> String {
        match self.0 {
            AbrStructure::Markovian => "abr-markovian",
            AbrStructure::Iv => "abr-iv",
            AbrStructure::Bc => "abr-bc",
            AbrStructure::Ivbc => "abr-ivbc",
        }
        .into()
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
        let capacity = LogNormal::new(0.0, 0.5).expect("valid");
        let buffer_noise = Normal::new(0.0, 0.3).expect("valid");
        let mut i = Array2::zeros((n, 1));
        let mut z = Array2::zeros((n, 1));
        let mut x = Array2::zeros((n, 1));
        let mut u = Array2::zeros((n, 1));
        let mut v = Array2::zeros((n, 1));
        for k in 0..n {
            let uk: f64 = capacity.sample(&mut rng);
            let zk = uk.ln() + buffer_noise.sample(&mut rng);
            let policy = rng.random_range(1..=POLICIES);
            let explore = rng.random_bool(EXPLORATION);
            let random_rate = BITRATES[rng.random_range(0..BITRATES.len())];
            let xk = match self.0 {
                AbrStructure::Markovian => random_rate,
                _ if explore => random_rate,
                AbrStructure::Bc => policy_bitrate(1.0, zk),
                AbrStructure::Iv | AbrStructure::Ivbc => policy_bitrate(policy_ratio(policy), zk),
            };
            i[[k, 0]] = policy as f64;
            z[[k, 0]] = zk;
            x[[k, 0]] = xk;
            u[[k, 0]] = uk;
            v[[k, 0]] = abr_throughput(xk, uk);
        }
        Ok(Dataset {
            scm: self.name(),
            seed,
            i: self.has_instrument().then_some(i),
            z: self.observes_buffer().then_some(z),
            x,
            v,
            u_hidden: Some(u),
        })
    }

    fn x_in_domain(&self, x: &[f64]) -> bool {
        x.len() == 1 && BITRATES.contains(&x[0])
    }

    fn true_forward(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![abr_throughput(x[0], u[0])]
    }

    fn true_inverse(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        vec![abr_capacity(x[0], v[0])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{conditional_independence_test, independence_test};

    #[test]
    fn throughput_is_increasing_in_capacity() {
        for &x in &BITRATES {
            let mut prev = 0.0;
            for k in 1..2000 {
                let u = 0.005 * k as f64;
                let v = abr_throughput(x, u);
                let h = 1e-6 * u;
                let fd = (abr_throughput(x, u + h) - abr_throughput(x, u - h)) / (2.0 * h);
                assert!(v > prev && fd > 0.0, "x = {x}, u = {u}");
                assert!(v <= x.min(u));
                prev = v;
            }
        }
    }

    #[test]
    fn capacity_inverts_throughput() {
        for &x in &BITRATES {
            for u in [0.05, 0.3, 1.0, 2.5, 6.0] {
                let back = abr_capacity(x, abr_throughput(x, u));
                assert!((back - u).abs() < 1e-9 * u, "x {x} u {u} back {back}");
            }
        }
        assert!(abr_capacity(1.0, 1.5).is_nan());
    }

    #[test]
    fn policies_are_distinct_threshold_maps() {
        let ratios: Vec<f64> = (1..=POLICIES).map(policy_ratio).collect();
        assert!((ratios[0] - 0.35).abs() < 1e-15 && (ratios[9] - 3.0).abs() < 1e-12);
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(policy_bitrate(1.0, 0.0), 0.75);
        assert_eq!(policy_bitrate(1.0, -5.0), 0.3);
        assert_eq!(policy_bitrate(3.0, 0.0), 2.85);
    }

    #[test]
    fn columns_follow_the_structure() {
        let schema = |s| AbrLike(s).sample(10, 0).unwrap().schema();
        assert_eq!((schema(AbrStructure::Markovian).i, schema(AbrStructure::Markovian).z), (0, 0));
        assert_eq!((schema(AbrStructure::Iv).i, schema(AbrStructure::Iv).z), (1, 0));
        assert_eq!((schema(AbrStructure::Bc).i, schema(AbrStructure::Bc).z), (0, 1));
        assert_eq!((schema(AbrStructure::Ivbc).i, schema(AbrStructure::Ivbc).z), (1, 1));
    }

    #[test]
    fn markovian_bitrate_is_independent_of_capacity() {
        let ds = AbrLike(AbrStructure::Markovian).sample(3000, 1).unwrap();
        let u = ds.u_hidden.as_ref().unwrap().column(0).to_vec();
        let r = independence_test(&u, &ds.x.column(0).to_vec(), 200, 2).unwrap();
        assert!(r.statistic < 0.05 && r.p_value > 0.01, "{r:?}");
    }

    #[test]
    fn backdoor_structure_is_conditionally_independent() {
        let ds = AbrLike(AbrStructure::Bc).sample(4000, 3).unwrap();
        let u = ds.u_hidden.as_ref().unwrap().column(0).to_vec();
        let x = ds.x.column(0).to_vec();
        let z = ds.z.as_ref().unwrap().column(0).to_vec();
        let marginal = independence_test(&u, &x, 200, 4).unwrap();
        assert!(marginal.p_value < 0.01, "{marginal:?}");
        let cond = conditional_independence_test(&u, &x, &z, 10, 200, 5).unwrap();
        assert!(cond.p_value > 0.01, "{cond:?}");
    }
}
