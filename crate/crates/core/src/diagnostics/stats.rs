//! Small statistical building blocks.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conversion of sample containers into an `n x p` matrix.
pub trait AsSamples {
    fn to_samples(&self) -> Array2<f64>;
}

impl AsSamples for [f64] {
    fn to_samples(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), 1), self.to_vec()).expect("column")
    }
}

impl AsSamples for Vec<f64> {
    fn to_samples(&self) -> Array2<f64> {
        self.as_slice().to_samples()
    }
}

impl AsSamples for Array1<f64> {
    fn to_samples(&self) -> Array2<f64> {
        self.to_vec().to_samples()
    }
}

impl AsSamples for Array2<f64> {
    fn to_samples(&self) -> Array2<f64> {
        self.clone()
    }
}

impl AsSamples for ArrayView2<'_, f64> {
    fn to_samples(&self) -> Array2<f64> {
        self.to_owned()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len().max(2) - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule-of-thumb Gaussian kernel bandwidth.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let sd = std_dev(xs);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (xs.len() as f64).powf(-0.2)
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut out = vec![0.0; xs.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && xs[idx[e + 1]] == xs[idx[k]] {
            e += 1;
        }
        let r = 0.5 * (k + e) as f64 + 1.0;
        for &i in &idx[k..=e] {
            out[i] = r;
        }
        k = e + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal samples, got {} and {}", a.len(), b.len())));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn ks_p_value(d: f64, ne: f64) -> f64 {
    let s = ne.sqrt();
    kolmogorov_survival((s + 0.12 + 0.11 / s) * d)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS test needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, na * nb / (na + nb)),
    })
}

/// One-sample KS test against `U(0, 1)`.
pub fn ks_uniform(xs: &[f64]) -> Result<KsResult> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("KS test needs a non-empty sample".into()));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (k, x) in s.iter().enumerate() {
        let f = x.clamp(0.0, 1.0);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
    })
}

/// Survival function of the chi-square distribution with `2k` degrees of freedom.
pub fn chi2_survival_even(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let h = 0.5 * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..k {
        term *= h / j as f64;
        sum += term;
    }
    ((-h).exp() * sum).min(1.0)
}

/// Fisher's method: combined p-value of independent tests.
pub fn fisher_combine(p_values: &[f64]) -> f64 {
    let stat: f64 = p_values.iter().map(|p| -2.0 * p.max(1e-300).ln()).sum();
    chi2_survival_even(stat, p_values.len())
}

/// Determinant by partial-pivot LU.
pub fn determinant(m: &Array2<f64>) -> Result<f64> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape(format!("determinant of a {:?} matrix", m.dim())));
    }
    let mut a = m.clone();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|i, j| a[[*i, c]].abs().total_cmp(&a[[*j, c]].abs()))
            .expect("non-empty");
        if a[[p, c]] == 0.0 {
            return Ok(0.0);
        }
        if p != c {
            for k in 0..n {
                a.swap([p, k], [c, k]);
            }
            det = -det;
        }
        det *= a[[c, c]];
        for r in c + 1..n {
            let f = a[[r, c]] / a[[c, c]];
            for k in c..n {
                a[[r, k]] -= f * a[[c, k]];
            }
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn determinant_closed_forms() {
        assert_eq!(determinant(&array![[2.0]]).unwrap(), 2.0);
        assert!((determinant(&array![[1.0, 2.0], [3.0, 4.0]]).unwrap() + 2.0).abs() < 1e-15);
        let m = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert!((determinant(&m).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(determinant(&array![[1.0, 2.0], [2.0, 4.0]]).unwrap(), 0.0);
    }

    #[test]
    fn chi_square_survival() {
        // 2 dof: exp(-x/2)
        assert!((chi2_survival_even(3.0, 1) - (-1.5f64).exp()).abs() < 1e-15);
        // 4 dof at 9.487729 is 0.05
        assert!((chi2_survival_even(9.487_729_036_781_154, 2) - 0.05).abs() < 1e-9);
        assert!((fisher_combine(&[0.3]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
        let a = [0.1, 0.5, 0.2, 0.9];
        let b: Vec<f64> = a.iter().map(|t: &f64| t.powi(3)).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|t| -t).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01
        assert!((kolmogorov_survival(1.358_1) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.627_6) - 0.01).abs() < 1e-4);
        let a: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let b: Vec<f64> = (0..100).map(|k| k as f64 + 1000.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
        assert_eq!(ks_two_sample(&a, &a).unwrap().statistic, 0.0);
    }

    #[test]
    fn silverman_normal_reference() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h = silverman_bandwidth(&xs);
        assert!((h - 0.9 * 100_000f64.powf(-0.2)).abs() < 0.01 * h);
    }
}
