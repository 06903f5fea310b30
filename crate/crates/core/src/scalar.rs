//! Scalar abstraction shared by the flow, tape and diagnostic code.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating point scalar used throughout the crate: `f32`, `f64`, or a
/// forward-mode [`Dual`](crate::dual::Dual) built on top of either.
pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// Converts a literal. Panics only if `Self` cannot represent finite `f64`s.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    /// Value as `f64`, dropping any derivative part.
    #[inline]
    fn val(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `ln(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        let zero = Self::zero();
        if self > Self::lit(30.0) {
            self
        } else {
            self.max(zero) + (-(self.abs())).exp().ln_1p()
        }
    }

    #[inline]
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `ln(1/sqrt(2 pi))`.
pub const LOG_INV_SQRT_2PI: f64 = -0.918_938_533_204_672_8;

/// Standard normal log density.
#[inline]
pub fn std_normal_log_pdf<T: Real>(x: T) -> T {
    T::lit(LOG_INV_SQRT_2PI) - T::lit(0.5) * x * x
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln(Phi(b) - Phi(a))` for `a < b`, evaluated in whichever tail keeps precision.
pub fn log_normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        // upper tail: Phi(-a) - Phi(-b)
        let hi = 0.5 * libm::erfc(a / std::f64::consts::SQRT_2);
        let lo = 0.5 * libm::erfc(b / std::f64::consts::SQRT_2);
        (hi - lo).ln()
    } else {
        (std_normal_cdf(b) - std_normal_cdf(a)).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_range() {
        for &x in &[-5.0f64, -0.3, 0.0, 1.7, 12.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((x.softplus() - naive).abs() < 1e-12);
        }
        assert_eq!(800.0f64.softplus(), 800.0);
        assert!((-800.0f64).softplus() >= 0.0);
    }

    #[test]
    fn normal_interval_is_stable_in_tails() {
        let mid = log_normal_interval(-0.5, 0.5);
        assert!((mid - (std_normal_cdf(0.5) - std_normal_cdf(-0.5)).ln()).abs() < 1e-14);
        let far = log_normal_interval(9.0, 9.5);
        assert!(far.is_finite() && far < -40.0);
        assert!((std_normal_log_pdf(0.0f64) - LOG_INV_SQRT_2PI).abs() < 1e-15);
    }
}
