use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{self, Var};

/// Numeric type the model and plant code is written against: plain `f64`
/// for fast evaluation, [`Var`] when gradients are needed.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living alongside `self` (same tape for [`Var`]).
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn silu(self) -> Self;
    /// Sign with zero derivative; `sgn(0) = 0`.
    fn sign(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max_c(self, c: f64) -> Self;
    fn min_c(self, c: f64) -> Self;
    /// `sgn(a) * max(|a|, eps)` with `sgn(0) = +1`.
    fn clamp_away(self, eps: f64) -> Self;
    /// `bias + Σ w_i x_i`.
    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self;

    fn recip(self) -> Self {
        self.lift(1.0) / self
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn lift(&self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    #[inline]
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    #[inline]
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    #[inline]
    fn silu(self) -> f64 {
        tape::silu(self)
    }
    #[inline]
    fn sign(self) -> f64 {
        tape::sign(self)
    }
    #[inline]
    fn max(self, other: f64) -> f64 {
        if self >= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn min(self, other: f64) -> f64 {
        if self <= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn max_c(self, c: f64) -> f64 {
        Scalar::max(self, c)
    }
    #[inline]
    fn min_c(self, c: f64) -> f64 {
        Scalar::min(self, c)
    }
    #[inline]
    fn clamp_away(self, eps: f64) -> f64 {
        tape::clamp_away(self, eps)
    }
    #[inline]
    fn affine(bias: f64, w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).fold(bias, |acc, (a, b)| acc + a * b)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn lift(&self, c: f64) -> Self {
        self.tape().constant(c)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn silu(self) -> Self {
        Var::silu(self)
    }
    fn sign(self) -> Self {
        Var::sign(self)
    }
    fn max(self, other: Self) -> Self {
        Var::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        Var::min(self, other)
    }
    fn max_c(self, c: f64) -> Self {
        Var::max_c(self, c)
    }
    fn min_c(self, c: f64) -> Self {
        Var::min_c(self, c)
    }
    fn clamp_away(self, eps: f64) -> Self {
        Var::clamp_away(self, eps)
    }
    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self {
        bias.tape().affine(bias, w, x)
    }
}
