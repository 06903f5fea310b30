//! Forward-mode dual numbers with a fixed number of tangent directions.
//!
//! `Dual<T, N>` implements [`Real`], so any generic numeric routine in this crate
//! can be evaluated on it to obtain `N` directional derivatives in one pass. The
//! spline layers use this to differentiate a single rational segment with
//! respect to its knots, derivatives and input.

use std::cmp::Ordering;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
pub struct Dual<T, const N: usize> {
    pub re: T,
    pub eps: [T; N],
}

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn constant(re: T) -> Self {
        Self {
            re,
            eps: [T::zero(); N],
        }
    }

    /// A variable seeded along tangent direction `k`.
    pub fn var(re: T, k: usize) -> Self {
        let mut d = Self::constant(re);
        d.eps[k] = T::one();
        d
    }

    #[inline]
    fn chain(self, re: T, slope: T) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * slope;
        }
        Self { re, eps }
    }
}

impl<T: Real, const N: usize> Default for Dual<T, N> {
    fn default() -> Self {
        Self::constant(T::zero())
    }
}

impl<T: Real, const N: usize> PartialEq for Dual<T, N> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<T: Real, const N: usize> PartialOrd for Dual<T, N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.re, -T::one())
    }
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, oe) in eps.iter_mut().zip(o.eps) {
            *e = *e + oe;
        }
        Self { re: self.re + o.re, eps }
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, oe) in eps.iter_mut().zip(o.eps) {
            *e = *e - oe;
        }
        Self { re: self.re - o.re, eps }
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, oe) in eps.iter_mut().zip(o.eps) {
            *e = *e * o.re + self.re * oe;
        }
        Self { re: self.re * o.re, eps }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.re;
        let re = self.re * inv;
        let mut eps = self.eps;
        for (e, oe) in eps.iter_mut().zip(o.eps) {
            *e = (*e - re * oe) * inv;
        }
        Self { re, eps }
    }
}

impl<T: Real, const N: usize> Rem for Dual<T, N> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // a % b = a - trunc(a / b) * b
        let q = (self.re / o.re).trunc();
        self - Self::constant(q) * o
    }
}

impl<T: Real, const N: usize> Zero for Dual<T, N> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero()
    }
}

impl<T: Real, const N: usize> One for Dual<T, N> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real, const N: usize> Num for Dual<T, N> {
    type FromStrRadixErr = T::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Real, const N: usize> ToPrimitive for Dual<T, N> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
    fn to_f32(&self) -> Option<f32> {
        self.re.to_f32()
    }
}

impl<T: Real, const N: usize> NumCast for Dual<T, N> {
    fn from<P: ToPrimitive>(n: P) -> Option<Self> {
        <T as NumCast>::from(n).map(Self::constant)
    }
}

impl<T: Real, const N: usize> FromPrimitive for Dual<T, N> {
    fn from_i64(n: i64) -> Option<Self> {
        T::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        T::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        T::from_f64(n).map(Self::constant)
    }
}

macro_rules! const_fn {
    ($($name:ident),*) => {
        $(fn $name() -> Self { Self::constant(T::$name()) })*
    };
}

macro_rules! flat_fn {
    ($($name:ident),*) => {
        $(fn $name(self) -> Self { Self::constant(self.re.$name()) })*
    };
}

macro_rules! pred_fn {
    ($($name:ident),*) => {
        $(fn $name(self) -> bool { self.re.$name() })*
    };
}

impl<T: Real, const N: usize> Float for Dual<T, N> {
    const_fn!(nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value, epsilon);
    flat_fn!(floor, ceil, round, trunc, signum);
    pred_fn!(is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);

    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let re = self.re.powi(n);
        let slope = T::from_i32(n).unwrap() * self.re.powi(n - 1);
        self.chain(re, slope)
    }
    fn powf(self, n: Self) -> Self {
        // a^b = exp(b ln a)
        if n.eps.iter().all(|e| e.is_zero()) {
            let re = self.re.powf(n.re);
            let slope = n.re * self.re.powf(n.re - T::one());
            return self.chain(re, slope);
        }
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        let re = self.re.sqrt();
        self.chain(re, T::lit(0.5) / re)
    }
    fn exp(self) -> Self {
        let re = self.re.exp();
        self.chain(re, re)
    }
    fn exp2(self) -> Self {
        let re = self.re.exp2();
        self.chain(re, re * T::lit(std::f64::consts::LN_2))
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * T::lit(std::f64::consts::LN_2)).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * T::lit(std::f64::consts::LN_10)).recip())
    }
    fn max(self, other: Self) -> Self {
        if other.re > self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.re < self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let re = self.re.cbrt();
        self.chain(re, (T::lit(3.0) * re * re).recip())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (T::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(T::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (T::one() + self.re * self.re).recip())
    }
    fn atan2(self, other: Self) -> Self {
        // d atan2(y, x) = (x dy - y dx) / (x^2 + y^2)
        let r2 = self.re * self.re + other.re * other.re;
        let mut eps = self.eps;
        for (e, oe) in eps.iter_mut().zip(other.eps) {
            *e = (other.re * *e - self.re * oe) / r2;
        }
        Self {
            re: self.re.atan2(other.re),
            eps,
        }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (T::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + T::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - T::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (T::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<T: Real, const N: usize> Real for Dual<T, N> {}

#[cfg(test)]
mod tests {
    use super::*;

    type D2 = Dual<f64, 2>;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_derivatives_match_finite_differences() {
        let fns: Vec<(fn(D2) -> D2, fn(f64) -> f64)> = vec![
            (|x| x.exp(), |x| x.exp()),
            (|x| x.ln(), |x| x.ln()),
            (|x| x.sqrt(), |x| x.sqrt()),
            (|x| x.sin() * x.cos(), |x| x.sin() * x.cos()),
            (|x| x.powi(3) / (x + D2::one()), |x| x.powi(3) / (x + 1.0)),
            (|x| x.softplus(), |x| x.softplus()),
            (|x| x.sigmoid().ln(), |x| x.sigmoid().ln()),
            (|x| x.tanh().atan(), |x| x.tanh().atan()),
            (|x| x.powf(D2::lit(1.7)), |x| x.powf(1.7)),
        ];
        for (dual_f, f) in fns {
            for &x in &[0.3, 1.1, 2.5] {
                let d = dual_f(D2::var(x, 0));
                assert!((d.re - f(x)).abs() < 1e-12);
                assert!((d.eps[0] - fd(f, x)).abs() < 1e-6, "at {x}: {} vs {}", d.eps[0], fd(f, x));
                assert_eq!(d.eps[1], 0.0);
            }
        }
    }

    #[test]
    fn two_directions_give_partial_derivatives() {
        let a = D2::var(2.0, 0);
        let b = D2::var(3.0, 1);
        let f = a * a * b / (a + b);
        // f = a^2 b / (a + b)
        let dfa = (2.0 * 2.0 * 3.0 * 5.0 - 4.0 * 3.0) / 25.0;
        let dfb = (4.0 * 5.0 - 4.0 * 3.0) / 25.0;
        assert!((f.eps[0] - dfa).abs() < 1e-14);
        assert!((f.eps[1] - dfb).abs() < 1e-14);
    }
}
