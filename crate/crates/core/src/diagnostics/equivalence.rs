//! Measures whether two exogenous representations differ only by an
//! invertible reparameterisation.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::stats::{mean, quantile_sorted, ranks, spearman};
use crate::counterfactual::Mechanism;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivalenceMode {
    RankCorr,
    FunctionalR2,
}

/// Piecewise-linear monotone map `u_b -> u_a` through matching quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub knots_in: Vec<f64>,
    pub knots_out: Vec<f64>,
}

impl PiecewiseLinear {
    /// Linear interpolation, constant beyond the outer knots.
    pub fn eval(&self, t: f64) -> f64 {
        let k = &self.knots_in;
        let n = k.len();
        if t <= k[0] {
            return self.knots_out[0];
        }
        if t >= k[n - 1] {
            return self.knots_out[n - 1];
        }
        let i = k.partition_point(|p| *p <= t).clamp(1, n - 1);
        let w = if k[i] > k[i - 1] { (t - k[i - 1]) / (k[i] - k[i - 1]) } else { 0.0 };
        self.knots_out[i - 1] + w * (self.knots_out[i] - self.knots_out[i - 1])
    }

    /// Fits `u_a ~ g(u_b)` by pairing quantiles at `n_knots` levels, reversed
    /// when the relation is decreasing.
    pub fn fit_quantiles(ua: &[f64], ub: &[f64], n_knots: usize, increasing: bool) -> Self {
        let mut a = ua.to_vec();
        let mut b = ub.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let levels = (0..n_knots).map(|k| k as f64 / (n_knots - 1) as f64);
        let (mut knots_in, mut knots_out) = (Vec::new(), Vec::new());
        for q in levels {
            knots_in.push(quantile_sorted(&b, q));
            knots_out.push(quantile_sorted(&a, if increasing { q } else { 1.0 - q }));
        }
        Self { knots_in, knots_out }
    }

    /// Interpolates through `(u_b, u_a)` pairs sorted by `u_b`.
    pub fn through_pairs(ua: &[f64], ub: &[f64]) -> Self {
        let mut pairs: Vec<(f64, f64)> = ub.iter().copied().zip(ua.iter().copied()).collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        Self {
            knots_in: pairs.iter().map(|p| p.0).collect(),
            knots_out: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub mode: EquivalenceMode,
    /// Spearman rho, or the smaller of the two out-of-sample R^2 values.
    pub value: f64,
    /// Both directions for `FunctionalR2`: `[a from b, b from a]`.
    pub directions: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
    /// Scalar case only.
    pub g: Option<PiecewiseLinear>,
    pub n: usize,
}

pub const KNN_K: usize = 5;
/// Rows used by the nearest-neighbour regression (brute force, quadratic).
pub const KNN_MAX_ROWS: usize = 6000;

/// Compares two samples of the exogenous variable row by row. Scalar: passes
/// when `|rho| >= threshold`. Multi-d: `k`-NN regression fitted on the first
/// half and scored on the second, both directions; passes when the smaller
/// `R^2` reaches `threshold`. Both sides are replaced by their per-coordinate
/// rank scores first: that keeps an invertible relation invertible, and stops
/// a few heavy-tail rows from dominating the squared error.
pub fn equivalence_of_samples(ua: ArrayView2<f64>, ub: ArrayView2<f64>, threshold: f64) -> Result<EquivalenceReport> {
    if ua.dim() != ub.dim() {
        return Err(Error::Shape(format!("equivalence needs equal shapes, got {:?} and {:?}", ua.dim(), ub.dim())));
    }
    let n = ua.nrows();
    if n < 20 {
        return Err(Error::InvalidArgument(format!("equivalence needs at least 20 rows, got {n}")));
    }
    if ua.ncols() == 1 {
        let a = ua.column(0).to_vec();
        let b = ub.column(0).to_vec();
        let rho = spearman(&a, &b)?;
        return Ok(EquivalenceReport {
            mode: EquivalenceMode::RankCorr,
            value: rho,
            directions: vec![rho],
            threshold,
            pass: rho.abs() >= threshold,
            g: Some(PiecewiseLinear::fit_quantiles(&a, &b, 101, rho >= 0.0)),
            n,
        });
    }
    let m = n.min(KNN_MAX_ROWS);
    let ua = rank_scores(ua.slice(ndarray::s![..m, ..]));
    let ub = rank_scores(ub.slice(ndarray::s![..m, ..]));
    let ab = knn_r2(ub.view(), ua.view())?;
    let ba = knn_r2(ua.view(), ub.view())?;
    let value = ab.min(ba);
    Ok(EquivalenceReport {
        mode: EquivalenceMode::FunctionalR2,
        value,
        directions: vec![ab, ba],
        threshold,
        pass: value >= threshold,
        g: None,
        n: m,
    })
}

/// Row-wise `u_a = f_a^-1(x, v)` and `u_b = f_b^-1(x, v)` on a shared
/// evaluation set, then `equivalence_of_samples`.
pub fn equivalence_check(
    a: &dyn Mechanism,
    b: &dyn Mechanism,
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
    threshold: f64,
) -> Result<EquivalenceReport> {
    if a.var_dim() != b.var_dim() || a.x_dim() != b.x_dim() {
        return Err(Error::Shape("mechanisms disagree on dimensions".into()));
    }
    let ua = a.inverse_batch(x, v)?;
    let ub = b.inverse_batch(x, v)?;
    equivalence_of_samples(ua.view(), ub.view(), threshold)
}

/// Each column mapped to `rank / (n + 1)`, ties sharing their mid-rank.
fn rank_scores(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    let scale = 1.0 / (m.nrows() + 1) as f64;
    for (c, col) in m.columns().into_iter().enumerate() {
        for (r, q) in ranks(&col.to_vec()).into_iter().enumerate() {
            out[[r, c]] = q * scale;
        }
    }
    out
}

/// Standardised coordinates so no axis dominates the neighbour search.
fn standardize(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut col in out.columns_mut() {
        let c = col.to_vec();
        let mu = mean(&c);
        let sd = (c.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / c.len() as f64).sqrt();
        col.mapv_inplace(|t| if sd > 0.0 { (t - mu) / sd } else { 0.0 });
    }
    out
}

/// Out-of-sample `R^2 = 1 - SSE / SST` (summed over target coordinates) of
/// predicting `target` from `input` with a `KNN_K`-NN mean, training on the
/// first half of the rows and scoring the second.
fn knn_r2(input: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    let n = input.nrows();
    let half = n / 2;
    let xs = standardize(input);
    let (mut sse, mut sst) = (0.0, 0.0);
    let test_means: Vec<f64> = (0..target.ncols())
        .map(|c| mean(&target.column(c).slice(ndarray::s![half..]).to_vec()))
        .collect();
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(half);
    for r in half..n {
        best.clear();
        for t in 0..half {
            let d: f64 = xs.row(r).iter().zip(xs.row(t)).map(|(p, q)| (p - q) * (p - q)).sum();
            best.push((d, t));
        }
        let k = KNN_K.min(half);
        best.select_nth_unstable_by(k - 1, |p, q| p.0.total_cmp(&q.0));
        for c in 0..target.ncols() {
            let pred = best[..k].iter().map(|p| target[[p.1, c]]).sum::<f64>() / k as f64;
            sse += (target[[r, c]] - pred).powi(2);
            sst += (target[[r, c]] - test_means[c]).powi(2);
        }
    }
    if sst <= 0.0 {
        return Err(Error::InvalidArgument("target is constant on the held-out half".into()));
    }
    Ok(1.0 - sse / sst)
}

/// How far a reparameterisation fitted at one condition is from explaining
/// another: fit `u_a = g(u_b)` on `v_fit` at `x_fit`, then report the mean
/// `|u_a - g(u_b)|` on `v_test` at `x_test`. Equivalent mechanisms give zero.
pub fn cross_condition_residual(
    a: &dyn Mechanism,
    b: &dyn Mechanism,
    x_fit: &[f64],
    v_fit: &[f64],
    x_test: &[f64],
    v_test: &[f64],
) -> Result<f64> {
    if a.var_dim() != 1 || b.var_dim() != 1 {
        return Err(Error::Shape("cross-condition residual is defined for scalar mechanisms".into()));
    }
    if v_fit.len() < 2 || v_test.is_empty() {
        return Err(Error::InvalidArgument("need at least two fit values and one test value".into()));
    }
    let inv = |m: &dyn Mechanism, x: &[f64], vs: &[f64]| -> Result<Vec<f64>> {
        vs.iter().map(|v| m.inverse(x, &[*v]).map(|u| u[0])).collect()
    };
    let g = PiecewiseLinear::through_pairs(&inv(a, x_fit, v_fit)?, &inv(b, x_fit, v_fit)?);
    let ua = inv(a, x_test, v_test)?;
    let ub = inv(b, x_test, v_test)?;
    Ok(ua.iter().zip(&ub).map(|(p, q)| (p - g.eval(*q)).abs()).sum::<f64>() / ua.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::TrueBgm;
    use crate::flow::{raw_to_spline, ConditionalBijection, FlowConfig};
    use crate::scm::{Counterexample, CounterexampleKind, GroundTruthScm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn flow(seed: u64, d: usize) -> ConditionalBijection<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            hidden: vec![8],
            spline_layers: 2,
            bins: 8,
            ..FlowConfig::default()
        };
        let mut f = ConditionalBijection::new(1, d, &cfg, &mut rng);
        for p in f.params_mut() {
            p.mapv_inplace(|w| 2.0 * w + 0.3);
        }
        f
    }

    fn evaluation_set(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        (x, v)
    }

    fn warp() -> crate::flow::SplineParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let raw: Vec<f64> = (0..crate::flow::spline::raw_len(8)).map(|_| rng.random_range(-1.5..1.5)).collect();
        raw_to_spline(&raw, 3.0, 8).unwrap()
    }

    #[test]
    fn warped_copy_is_equivalent() {
        let a = flow(1, 1);
        let b = a.clone().with_input_warp(warp());
        let (x, v) = evaluation_set(2, 10_000, 1);
        let r = equivalence_check(&a, &b, x.view(), v.view(), 0.999).unwrap();
        assert_eq!(r.mode, EquivalenceMode::RankCorr);
        assert!(r.pass && r.value >= 0.999, "{}", r.value);
        // g recovers the warp: u_a = warp(u_b)
        let g = r.g.unwrap();
        let w = warp();
        for t in [-1.0, 0.0, 0.5] {
            let ub = crate::flow::spline_inverse(&w, t).unwrap().0;
            assert!((g.eval(ub) - t).abs() < 0.1, "{t} {}", g.eval(ub));
        }
    }

    #[test]
    fn warped_copy_is_equivalent_in_two_dimensions() {
        let a = flow(3, 2);
        let b = a.clone().with_input_warp(warp());
        let (x, v) = evaluation_set(4, 6000, 2);
        let r = equivalence_check(&a, &b, x.view(), v.view(), 0.95).unwrap();
        assert_eq!(r.mode, EquivalenceMode::FunctionalR2);
        assert!(r.pass && r.directions.iter().all(|t| *t > 0.95), "{:?}", r.directions);
    }

    #[test]
    fn heavy_tailed_bijection_is_equivalent_at_small_n() {
        let (_, v) = evaluation_set(6, 1000, 2);
        let g = Array2::from_shape_fn((1000, 2), |(r, c)| {
            let (a, b) = (v[[r, 0]], v[[r, 1]]);
            if c == 0 {
                a.exp()
            } else {
                (1.5 * (a + b)).exp()
            }
        });
        let r = equivalence_of_samples(v.view(), g.view(), 0.95).unwrap();
        assert!(r.pass, "{:?}", r.directions);
    }

    #[test]
    fn one_lost_coordinate_is_not_equivalent() {
        let (_, v) = evaluation_set(7, 4000, 2);
        let (_, w) = evaluation_set(17, 4000, 2);
        let mut half = v.clone();
        half.column_mut(1).assign(&w.column(0));
        let r = equivalence_of_samples(v.view(), half.view(), 0.95).unwrap();
        assert!(!r.pass && r.value < 0.7, "{:?}", r.directions);
    }

    #[test]
    fn unrelated_samples_are_not_equivalent() {
        let (_, v) = evaluation_set(5, 4000, 2);
        let u_noise = Array2::from_shape_fn((4000, 2), |(r, c)| ((r * 7919 + c * 104_729) % 1000) as f64);
        let r = equivalence_of_samples(v.view(), u_noise.view(), 0.95).unwrap();
        assert!(!r.pass && r.value < 0.2, "{:?}", r.directions);
    }

    #[test]
    fn counterexample_mechanisms_disagree_when_pooled() {
        // at x = 1 both abduct u = v; at x = 0 one is increasing in v, the other decreasing
        let fstar = Counterexample(CounterexampleKind::FStar);
        let fhat = Counterexample(CounterexampleKind::FHat);
        let ds = fstar.sample(10_000, 3).unwrap();
        let r = equivalence_check(&TrueBgm(&fstar), &TrueBgm(&fhat), ds.x.view(), ds.v.view(), 0.99).unwrap();
        assert!(!r.pass && r.value.abs() < 0.1, "{}", r.value);
    }

    #[test]
    fn independent_samples_have_small_rank_correlation() {
        let (_, v) = evaluation_set(8, 10_000, 2);
        let r = equivalence_of_samples(v.slice(ndarray::s![.., ..1]), v.slice(ndarray::s![.., 1..]), 0.99).unwrap();
        assert!(r.value.abs() < 0.05 && !r.pass);
    }

    #[test]
    fn counterexample_breaks_across_conditions() {
        let fstar = Counterexample(CounterexampleKind::FStar);
        let fhat = Counterexample(CounterexampleKind::FHat);
        let (a, b) = (TrueBgm(&fstar), TrueBgm(&fhat));
        let fit: Vec<f64> = (0..101).map(|k| k as f64 / 100.0).collect();
        let test: Vec<f64> = (0..1000).map(|k| -(k as f64 + 0.5) / 1000.0).collect();
        // same condition: g is the identity
        assert!(cross_condition_residual(&a, &b, &[1.0], &fit, &[1.0], &fit).unwrap() < 1e-12);
        // mean |2v + 1| over v in (-1, 0) is 1/2
        let r = cross_condition_residual(&a, &b, &[1.0], &fit, &[0.0], &test).unwrap();
        assert!((r - 0.5).abs() < 1e-3 && r > 0.2, "{r}");
    }

    #[test]
    fn dimension_mismatch() {
        let (x, v) = evaluation_set(9, 100, 1);
        assert!(equivalence_check(&flow(1, 1), &flow(1, 2), x.view(), v.view(), 0.9).is_err());
        assert!(equivalence_of_samples(v.view(), x.slice(ndarray::s![..50, ..]), 0.9).is_err());
    }

    #[test]
    fn piecewise_map() {
        let g = PiecewiseLinear {
            knots_in: vec![0.0, 1.0, 3.0],
            knots_out: vec![0.0, 2.0, 3.0],
        };
        assert_eq!(g.eval(-1.0), 0.0);
        assert_eq!(g.eval(0.5), 1.0);
        assert_eq!(g.eval(2.0), 2.5);
        assert_eq!(g.eval(9.0), 3.0);
    }
}
