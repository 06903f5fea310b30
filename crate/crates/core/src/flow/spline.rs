//! Monotone linear rational splines on `[-B, B]` with identity tails.
//!
//! Each bin `[x_k, x_{k+1}] -> [y_k, y_{k+1}]` is a pair of linear rational
//! pieces joined at an intermediate point placed at the bin midpoint. The
//! boundary derivatives are fixed to one so the identity tails join the spline
//! with a continuous first derivative.

use serde::{Deserialize, Serialize};

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_BOUND: f64 = 3.0;

/// Every bin keeps at least this fraction of `2B` in width and height.
pub const MIN_BIN_FRACTION: f64 = 1e-3;
/// Floor added to every interior derivative.
pub const MIN_DERIVATIVE: f64 = 1e-4;

/// Position of the intermediate point inside each bin.
const LAMBDA: f64 = 0.5;

/// Number of unconstrained values that parameterise a spline with `bins` bins:
/// `bins` width logits, `bins` height logits and `bins - 1` interior derivatives.
pub const fn raw_len(bins: usize) -> usize {
    3 * bins - 1
}

/// Shift that makes `MIN_DERIVATIVE + softplus(0 + shift) == 1`.
fn derivative_shift() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct SplineParams<T> {
    pub bound: T,
    pub knot_x: Vec<T>,
    pub knot_y: Vec<T>,
    pub derivs: Vec<T>,
}

impl<T: Real> SplineParams<T> {
    pub fn identity(bins: usize, bound: T) -> Self {
        let raw = vec![T::zero(); raw_len(bins)];
        raw_to_spline(&raw, bound, bins).expect("zero raw vector has the right length")
    }

    pub fn bin_count(&self) -> usize {
        self.knot_x.len().saturating_sub(1)
    }

    /// Checks the structural invariants: fixed endpoints, strictly increasing
    /// knots and positive derivatives.
    pub fn validate(&self) -> Result<()> {
        let k = self.bin_count();
        if k == 0 || self.knot_y.len() != k + 1 || self.derivs.len() != k + 1 {
            return Err(Error::Shape(format!(
                "spline with {} x-knots, {} y-knots, {} derivatives",
                self.knot_x.len(),
                self.knot_y.len(),
                self.derivs.len()
            )));
        }
        let b = self.bound;
        let ends_fixed = self.knot_x[0] == -b
            && self.knot_y[0] == -b
            && self.knot_x[k] == b
            && self.knot_y[k] == b;
        let increasing = |v: &[T]| v.windows(2).all(|w| w[0] < w[1]);
        if !ends_fixed || !increasing(&self.knot_x) || !increasing(&self.knot_y) {
            return Err(Error::InvalidArgument("spline knots are not strictly increasing on [-B, B]".into()));
        }
        if !self.derivs.iter().all(|d| *d > T::zero()) {
            return Err(Error::InvalidArgument("spline derivatives must be positive".into()));
        }
        Ok(())
    }

    fn segment_at_x(&self, u: T) -> Segment<T> {
        let k = locate(&self.knot_x, u);
        self.segment(k)
    }

    fn segment_at_y(&self, v: T) -> Segment<T> {
        let k = locate(&self.knot_y, v);
        self.segment(k)
    }

    fn segment(&self, k: usize) -> Segment<T> {
        Segment {
            x0: self.knot_x[k],
            x1: self.knot_x[k + 1],
            y0: self.knot_y[k],
            y1: self.knot_y[k + 1],
            d0: self.derivs[k],
            d1: self.derivs[k + 1],
        }
    }
}

/// Index `k` of the bin `[knots[k], knots[k+1]]` containing `t`.
fn locate<T: Real>(knots: &[T], t: T) -> usize {
    let last = knots.len() - 2;
    knots[1..knots.len() - 1].partition_point(|k| *k <= t).min(last)
}

/// Maps an unconstrained vector onto valid spline parameters.
///
/// Widths and heights go through a softmax with a minimum bin fraction and are
/// scaled to `2B`; interior derivatives go through a shifted softplus with a
/// floor, so an all-zero vector gives the identity map.
pub fn raw_to_spline<T: Real>(raw: &[T], bound: T, bins: usize) -> Result<SplineParams<T>> {
    if bins == 0 || raw.len() != raw_len(bins) {
        return Err(Error::Shape(format!(
            "spline with {bins} bins needs {} raw values, got {}",
            raw_len(bins.max(1)),
            raw.len()
        )));
    }
    let (knot_x, _) = knots_from_logits(&raw[..bins], bound);
    let (knot_y, _) = knots_from_logits(&raw[bins..2 * bins], bound);
    let mut derivs = Vec::with_capacity(bins + 1);
    derivs.push(T::one());
    let shift = T::lit(derivative_shift());
    derivs.extend(raw[2 * bins..].iter().map(|r| T::lit(MIN_DERIVATIVE) + (*r + shift).softplus()));
    derivs.push(T::one());
    Ok(SplineParams {
        bound,
        knot_x,
        knot_y,
        derivs,
    })
}

/// Returns the `bins + 1` knots and the softmax weights they came from.
fn knots_from_logits<T: Real>(logits: &[T], bound: T) -> (Vec<T>, Vec<T>) {
    let k = logits.len();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut soft: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let total = soft.iter().copied().fold(T::zero(), |a, b| a + b);
    for s in soft.iter_mut() {
        *s = *s / total;
    }
    let two_b = bound + bound;
    let floor = T::lit(MIN_BIN_FRACTION);
    let spread = T::one() - floor * T::from_usize(k).unwrap();
    let mut knots = Vec::with_capacity(k + 1);
    let mut acc = -bound;
    knots.push(acc);
    for s in &soft[..k - 1] {
        acc = acc + two_b * (floor + spread * *s);
        knots.push(acc);
    }
    knots.push(bound);
    (knots, soft)
}

/// One bin of the spline.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
    pub d0: T,
    pub d1: T,
}

/// Weights of the linear rational interpolant for a bin.
struct Weights<T> {
    wb: T,
    wc: T,
    yc: T,
}

impl<T: Real> Segment<T> {
    fn weights(&self) -> Weights<T> {
        let lambda = T::lit(LAMBDA);
        let one = T::one();
        let slope = (self.y1 - self.y0) / (self.x1 - self.x0);
        let wb = (self.d0 / self.d1).sqrt();
        let wc = (lambda * self.d0 + (one - lambda) * wb * self.d1) / slope;
        let yc = ((one - lambda) * self.y0 + lambda * wb * self.y1) / ((one - lambda) + lambda * wb);
        Weights { wb, wc, yc }
    }

    /// Denominator of the interpolant and `dv/dtheta` at `theta`.
    fn denominator_and_slope(&self, w: &Weights<T>, theta: T) -> (T, T) {
        let lambda = T::lit(LAMBDA);
        let one = T::one();
        if theta <= lambda {
            let den = (lambda - theta) + w.wc * theta;
            (den, w.wc * lambda * (w.yc - self.y0) / (den * den))
        } else {
            let den = w.wc * (one - theta) + w.wb * (theta - lambda);
            (den, w.wb * w.wc * (one - lambda) * (self.y1 - w.yc) / (den * den))
        }
    }

    /// Forward map and `ln dv/du`.
    pub fn forward(&self, u: T) -> (T, T) {
        let lambda = T::lit(LAMBDA);
        let one = T::one();
        let w = self.weights();
        let width = self.x1 - self.x0;
        let theta = (u - self.x0) / width;
        let (den, dtheta) = self.denominator_and_slope(&w, theta);
        let num = if theta <= lambda {
            self.y0 * (lambda - theta) + w.wc * w.yc * theta
        } else {
            w.wc * w.yc * (one - theta) + w.wb * self.y1 * (theta - lambda)
        };
        (num / den, dtheta.ln() - width.ln())
    }

    /// Inverse map and `ln du/dv`.
    pub fn inverse(&self, v: T) -> (T, T) {
        let lambda = T::lit(LAMBDA);
        let w = self.weights();
        let theta = if v <= w.yc {
            lambda * (self.y0 - v) / ((w.wc - T::one()) * v + self.y0 - w.wc * w.yc)
        } else {
            ((w.wc - lambda * w.wb) * v + lambda * w.wb * self.y1 - w.wc * w.yc)
                / ((w.wc - w.wb) * v + w.wb * self.y1 - w.wc * w.yc)
        };
        let width = self.x1 - self.x0;
        let (_, dtheta) = self.denominator_and_slope(&w, theta);
        (self.x0 + theta * width, width.ln() - dtheta.ln())
    }
}

fn check_finite<T: Real>(t: T) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("spline input {:?}", t)))
    }
}

/// Evaluates the spline at `u`; returns `(v, ln dv/du)`.
pub fn spline_forward<T: Real>(p: &SplineParams<T>, u: T) -> Result<(T, T)> {
    check_finite(u)?;
    if u < -p.bound || u > p.bound {
        return Ok((u, T::zero()));
    }
    Ok(p.segment_at_x(u).forward(u))
}

/// Inverts the spline at `v`; returns `(u, ln du/dv)`.
pub fn spline_inverse<T: Real>(p: &SplineParams<T>, v: T) -> Result<(T, T)> {
    check_finite(v)?;
    if v < -p.bound || v > p.bound {
        return Ok((v, T::zero()));
    }
    Ok(p.segment_at_y(v).inverse(v))
}

/// Evaluates the spline described by `raw` directly, forward or inverse.
pub(crate) fn eval_raw<T: Real>(raw: &[T], bound: T, bins: usize, input: T, inverse: bool) -> (T, T) {
    if !(input >= -bound && input <= bound) {
        return (input, T::zero());
    }
    let p = raw_to_spline(raw, bound, bins).expect("raw length checked by caller");
    if inverse {
        p.segment_at_y(input).inverse(input)
    } else {
        p.segment_at_x(input).forward(input)
    }
}

/// Vector-Jacobian product of [`eval_raw`].
///
/// Given upstream gradients for the output value and the log-determinant,
/// accumulates the gradient with respect to the raw parameters into `g_raw`
/// and returns the gradient with respect to the input.
pub(crate) fn eval_raw_vjp<T: Real>(
    raw: &[T],
    bound: T,
    bins: usize,
    input: T,
    inverse: bool,
    g_out: T,
    g_logdet: T,
    g_raw: &mut [T],
) -> T {
    if !(input >= -bound && input <= bound) {
        return g_out;
    }
    let (knot_x, soft_x) = knots_from_logits(&raw[..bins], bound);
    let (knot_y, soft_y) = knots_from_logits(&raw[bins..2 * bins], bound);
    let shift = T::lit(derivative_shift());
    let deriv = |k: usize| -> T {
        if k == 0 || k == bins {
            T::one()
        } else {
            T::lit(MIN_DERIVATIVE) + (raw[2 * bins + k - 1] + shift).softplus()
        }
    };
    let k = if inverse { locate(&knot_y, input) } else { locate(&knot_x, input) };

    // Differentiate the bin with respect to (x0, x1, y0, y1, d0, d1, input).
    type D7<T> = Dual<T, 7>;
    let seg = Segment {
        x0: D7::var(knot_x[k], 0),
        x1: D7::var(knot_x[k + 1], 1),
        y0: D7::var(knot_y[k], 2),
        y1: D7::var(knot_y[k + 1], 3),
        d0: D7::var(deriv(k), 4),
        d1: D7::var(deriv(k + 1), 5),
    };
    let t = D7::var(input, 6);
    let (out, logdet) = if inverse { seg.inverse(t) } else { seg.forward(t) };
    let g: [T; 7] = std::array::from_fn(|j| g_out * out.eps[j] + g_logdet * logdet.eps[j]);

    knot_vjp(&soft_x, bound, k, g[0], g[1], &mut g_raw[..bins]);
    knot_vjp(&soft_y, bound, k, g[2], g[3], &mut g_raw[bins..2 * bins]);
    for (offset, gd) in [(0usize, g[4]), (1, g[5])] {
        let knot = k + offset;
        if knot > 0 && knot < bins {
            let r = raw[2 * bins + knot - 1] + shift;
            g_raw[2 * bins + knot - 1] = g_raw[2 * bins + knot - 1] + gd * r.sigmoid();
        }
    }
    g[6]
}

/// Pushes gradients on knots `k` and `k + 1` back to the logits.
fn knot_vjp<T: Real>(soft: &[T], bound: T, k: usize, g_lo: T, g_hi: T, g_logits: &mut [T]) {
    let bins = soft.len();
    // knot j (0 < j < bins) is -B + sum_{i<j} width_i
    let mut g_width = vec![T::zero(); bins];
    for (knot, g) in [(k, g_lo), (k + 1, g_hi)] {
        if knot > 0 && knot < bins {
            for gw in &mut g_width[..knot] {
                *gw = *gw + g;
            }
        }
    }
    let spread = T::one() - T::lit(MIN_BIN_FRACTION) * T::from_usize(bins).unwrap();
    let scale = (bound + bound) * spread;
    let dot = soft
        .iter()
        .zip(&g_width)
        .fold(T::zero(), |acc, (s, g)| acc + *s * *g);
    for ((gl, s), g) in g_logits.iter_mut().zip(soft).zip(&g_width) {
        *gl = *gl + scale * *s * (*g - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(rng: &mut ChaCha8Rng, bins: usize, scale: f64) -> Vec<f64> {
        (0..raw_len(bins)).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_raw_is_identity() {
        let p = SplineParams::<f64>::identity(16, 3.0);
        p.validate().unwrap();
        let step = 6.0 / 16.0;
        for (k, (x, y)) in p.knot_x.iter().zip(&p.knot_y).enumerate() {
            assert!((x - (-3.0 + step * k as f64)).abs() < 1e-12);
            assert!((x - y).abs() < 1e-12);
        }
        assert!(p.derivs.iter().all(|d| (d - 1.0).abs() < 1e-12));
        let (v, ld) = spline_forward(&p, 0.7).unwrap();
        assert!((v - 0.7).abs() < 1e-12 && ld.abs() < 1e-12);
        let (u, ld) = spline_inverse(&p, -1.2).unwrap();
        assert!((u + 1.2).abs() < 1e-12 && ld.abs() < 1e-12);
    }

    #[test]
    fn dominant_width_logit_takes_almost_all_the_range() {
        let mut raw = vec![0.0; raw_len(16)];
        raw[5] = 20.0;
        let p = raw_to_spline(&raw, 3.0, 16).unwrap();
        p.validate().unwrap();
        // closed form of the normalisation
        let others = 15.0 * (-20.0f64).exp();
        let soft_big = 1.0 / (1.0 + others);
        let soft_small = (-20.0f64).exp() / (1.0 + others);
        let spread = 1.0 - 16.0 * MIN_BIN_FRACTION;
        let big = 6.0 * (MIN_BIN_FRACTION + spread * soft_big);
        let small = 6.0 * (MIN_BIN_FRACTION + spread * soft_small);
        assert!(((p.knot_x[6] - p.knot_x[5]) - big).abs() < 1e-12);
        assert!(((p.knot_x[1] - p.knot_x[0]) - small).abs() < 1e-12);
        assert!(big > 0.98 * 6.0);
    }

    #[test]
    fn wrong_raw_length_is_a_shape_error() {
        let err = raw_to_spline(&[0.0f64; 10], 3.0, 16).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn boundaries_are_fixed_and_tails_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = raw_to_spline(&random_raw(&mut rng, 16, 4.0), 3.0, 16).unwrap();
            assert_eq!(spline_forward(&p, -3.0).unwrap().0, -3.0);
            assert!((spline_forward(&p, 3.0).unwrap().0 - 3.0).abs() < 1e-12);
            assert_eq!(spline_forward(&p, 4.5).unwrap(), (4.5, 0.0));
            assert_eq!(spline_inverse(&p, -7.0).unwrap(), (-7.0, 0.0));
        }
    }

    #[test]
    fn logdet_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..500 {
            let p = raw_to_spline(&random_raw(&mut rng, 16, 2.0), 3.0, 16).unwrap();
            let u = rng.random_range(-2.99..2.99);
            let (_, ld) = spline_forward(&p, u).unwrap();
            let fd = (spline_forward(&p, u + h).unwrap().0 - spline_forward(&p, u - h).unwrap().0) / (2.0 * h);
            let rel = (ld.exp() - fd).abs() / fd;
            // a knot inside (u-h, u+h) makes the difference quotient a mix of two bins
            let near_knot = p.knot_x.iter().any(|k| (k - u).abs() < 2.0 * h);
            if !near_knot {
                assert!(rel < 1e-4, "u={u} rel={rel}");
            }
        }
    }

    #[test]
    fn roundtrip_and_logdet_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let p = raw_to_spline(&random_raw(&mut rng, 16, 3.0), 3.0, 16).unwrap();
            let u = rng.random_range(-3.0..3.0);
            let (v, ld_f) = spline_forward(&p, u).unwrap();
            let (back, ld_i) = spline_inverse(&p, v).unwrap();
            worst = worst.max((back - u).abs());
            assert!((ld_f + ld_i).abs() < 1e-8);
            let (v2, _) = spline_forward(&p, back).unwrap();
            assert!((v2 - v).abs() < 1e-9);
        }
        assert!(worst <= 1e-6, "worst roundtrip error {worst}");
    }

    #[test]
    fn strictly_increasing_on_a_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = raw_to_spline(&random_raw(&mut rng, 16, 5.0), 3.0, 16).unwrap();
            let vals: Vec<f64> = (0..=600)
                .map(|i| spline_forward(&p, -3.0 + 0.01 * i as f64).unwrap().0)
                .collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = SplineParams::<f64>::identity(4, 3.0);
        assert!(matches!(spline_forward(&p, f64::NAN), Err(Error::NonFinite(_))));
        assert!(matches!(spline_inverse(&p, f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn raw_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bins = 6;
        let bound = 3.0;
        for inverse in [false, true] {
            for _ in 0..40 {
                let raw = random_raw(&mut rng, bins, 1.5);
                let x = rng.random_range(-2.9..2.9);
                let (go, gl) = (0.7, -1.3);
                let objective = |r: &[f64], x: f64| {
                    let (o, l) = eval_raw(r, bound, bins, x, inverse);
                    go * o + gl * l
                };
                let mut g_raw = vec![0.0; raw.len()];
                let g_x = eval_raw_vjp(&raw, bound, bins, x, inverse, go, gl, &mut g_raw);
                let h = 1e-6;
                let fd_x = (objective(&raw, x + h) - objective(&raw, x - h)) / (2.0 * h);
                assert!((g_x - fd_x).abs() <= 1e-4 * fd_x.abs().max(1.0), "input grad {g_x} vs {fd_x}");
                for j in 0..raw.len() {
                    let mut up = raw.clone();
                    up[j] += h;
                    let mut dn = raw.clone();
                    dn[j] -= h;
                    let fd = (objective(&up, x) - objective(&dn, x)) / (2.0 * h);
                    assert!(
                        (g_raw[j] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                        "raw[{j}] inverse={inverse}: {} vs {fd}",
                        g_raw[j]
                    );
                }
            }
        }
    }

    #[test]
    fn f32_evaluation_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random_raw(&mut rng, 16, 2.0);
        let raw32: Vec<f32> = raw.iter().map(|r| *r as f32).collect();
        let p64 = raw_to_spline(&raw, 3.0, 16).unwrap();
        let p32 = raw_to_spline(&raw32, 3.0f32, 16).unwrap();
        for i in 0..50 {
            let u = -2.9 + 0.117 * i as f64;
            let (a, _) = spline_forward(&p64, u).unwrap();
            let (b, _) = spline_forward(&p32, u as f32).unwrap();
            assert!((a - b as f64).abs() < 1e-4);
        }
    }
}
