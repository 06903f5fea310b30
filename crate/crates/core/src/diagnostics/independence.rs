use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{fisher_combine, AsSamples};
use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    /// Distance correlation; size-weighted mean over bins for conditional tests.
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub n_perm: usize,
    /// `"none"` or `"z-bins(k)"`.
    pub conditioning: String,
    /// `(rows, dcor, p)` per z-bin.
    pub bins: Vec<(usize, f64, f64)>,
}

impl IndependenceReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

fn distances(m: &Array2<f64>, i: usize, j: usize) -> f64 {
    let (a, b) = (m.row(i), m.row(j));
    if a.len() == 1 {
        return (a[0] - b[0]).abs();
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row means and grand mean of the pairwise distance matrix.
fn distance_margins(m: &Array2<f64>) -> (Vec<f64>, f64) {
    let n = m.nrows();
    let mut rows = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distances(m, i, j);
            rows[i] += d;
            rows[j] += d;
        }
    }
    let total: f64 = rows.iter().sum();
    for r in rows.iter_mut() {
        *r /= n as f64;
    }
    (rows, total / (n * n) as f64)
}

/// Squared distance covariance of `a` and `b[perm]` from precomputed margins,
/// `mean(a_ij b_ij) - 2 mean_i(a_i. b_i.) + a.. b..`.
fn dcov2(a: &Array2<f64>, ma: &(Vec<f64>, f64), b: &Array2<f64>, mb: &(Vec<f64>, f64), perm: &[usize]) -> f64 {
    let n = a.nrows();
    let scalar = a.ncols() == 1 && b.ncols() == 1;
    let bp: Vec<f64> = if scalar { perm.iter().map(|k| b[[*k, 0]]).collect() } else { Vec::new() };
    let av: Vec<f64> = if scalar { a.column(0).to_vec() } else { Vec::new() };
    let mut cross = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        if scalar {
            let (ai, bi) = (av[i], bp[i]);
            for j in i + 1..n {
                s += (ai - av[j]).abs() * (bi - bp[j]).abs();
            }
        } else {
            for j in i + 1..n {
                s += distances(a, i, j) * distances(b, perm[i], perm[j]);
            }
        }
        cross += 2.0 * s;
    }
    let nn = (n * n) as f64;
    let rows: f64 = (0..n).map(|i| ma.0[i] * mb.0[perm[i]]).sum::<f64>() / n as f64;
    cross / nn - 2.0 * rows + ma.1 * mb.1
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!("samples of lengths {} and {}", a.nrows(), b.nrows())));
    }
    if a.nrows() < MIN_SAMPLES {
        return Err(Error::InsufficientSupport(format!(
            "independence test needs at least {MIN_SAMPLES} rows, got {}",
            a.nrows()
        )));
    }
    if !a.iter().chain(b.iter()).all(|t| t.is_finite()) {
        return Err(Error::NonFinite("independence test input".into()));
    }
    Ok(())
}

/// Distance correlation and permutation p-value on already validated input.
fn dcor_permutation(a: &Array2<f64>, b: &Array2<f64>, n_perm: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = a.nrows();
    let ma = distance_margins(a);
    let mb = distance_margins(b);
    let identity: Vec<usize> = (0..n).collect();
    let va = dcov2(a, &ma, a, &ma, &identity);
    let vb = dcov2(b, &mb, b, &mb, &identity);
    if va <= 0.0 || vb <= 0.0 {
        // a constant sample is independent of anything
        return (0.0, 1.0);
    }
    let norm = (va * vb).sqrt();
    let observed = dcov2(a, &ma, b, &mb, &identity).max(0.0) / norm;
    let mut perm = identity;
    let mut exceed = 0;
    for _ in 0..n_perm {
        perm.shuffle(rng);
        if dcov2(a, &ma, b, &mb, &perm).max(0.0) / norm >= observed {
            exceed += 1;
        }
    }
    (observed.sqrt().min(1.0), (1 + exceed) as f64 / (1 + n_perm) as f64)
}

/// Distance correlation of `a` and `b` with a permutation null of `n_perm`
/// shuffles of `b`.
pub fn independence_test<A: AsSamples + ?Sized, B: AsSamples + ?Sized>(
    a: &A,
    b: &B,
    n_perm: usize,
    seed: u64,
) -> Result<IndependenceReport> {
    let (a, b) = (a.to_samples(), b.to_samples());
    check_pair(&a, &b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (statistic, p_value) = dcor_permutation(&a, &b, n_perm, &mut rng);
    Ok(IndependenceReport {
        statistic,
        p_value,
        n: a.nrows(),
        n_perm,
        conditioning: "none".into(),
        bins: vec![(a.nrows(), statistic, p_value)],
    })
}

/// Equal-frequency bins of a scalar `z`; equal values never straddle a cut.
pub fn equal_frequency_bins(z: &[f64], n_bins: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|a, b| z[*a].total_cmp(&z[*b]));
    let mut bins = Vec::new();
    let mut start = 0;
    for k in 1..=n_bins {
        let mut end = (k * z.len()) / n_bins;
        if end <= start {
            continue;
        }
        while end < z.len() && z[idx[end]] == z[idx[end - 1]] {
            end += 1;
        }
        bins.push(idx[start..end].to_vec());
        start = end;
        if start == z.len() {
            break;
        }
    }
    bins
}

/// Within-bin independence of `a` and `b` given a scalar `z`, combined by
/// Fisher's method.
pub fn conditional_independence_test<A: AsSamples + ?Sized, B: AsSamples + ?Sized, Z: AsSamples + ?Sized>(
    a: &A,
    b: &B,
    z: &Z,
    n_bins: usize,
    n_perm: usize,
    seed: u64,
) -> Result<IndependenceReport> {
    let (a, b, z) = (a.to_samples(), b.to_samples(), z.to_samples());
    check_pair(&a, &b)?;
    if z.nrows() != a.nrows() || z.ncols() != 1 {
        return Err(Error::Shape(format!("conditioning sample must be {} x 1, got {:?}", a.nrows(), z.dim())));
    }
    let bins = equal_frequency_bins(z.column(0).as_slice().expect("column"), n_bins.max(1));
    let small: Vec<String> = bins
        .iter()
        .enumerate()
        .filter(|(_, b)| b.len() < MIN_SAMPLES)
        .map(|(k, b)| format!("bin {k}: {} rows", b.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::InsufficientSupport(format!(
            "z-bins need at least {MIN_SAMPLES} rows: {}",
            small.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_bin = Vec::with_capacity(bins.len());
    for rows in &bins {
        let (s, p) = dcor_permutation(&a.select(Axis(0), rows), &b.select(Axis(0), rows), n_perm, &mut rng);
        per_bin.push((rows.len(), s, p));
    }
    let n = a.nrows();
    let statistic = per_bin.iter().map(|(m, s, _)| *m as f64 * s).sum::<f64>() / n as f64;
    let p_value = fisher_combine(&per_bin.iter().map(|b| b.2).collect::<Vec<_>>());
    Ok(IndependenceReport {
        statistic,
        p_value,
        n,
        n_perm,
        conditioning: format!("z-bins({})", per_bin.len()),
        bins: per_bin,
    })
}
