//! Forward-mode dual numbers.
//!
//! [`Dual<T>`] is generic over its coefficient type, so `Dual<Dual<f64>>`
//! carries exact mixed second derivatives. Brackets of brackets (Jacobi
//! identity) and gradients of `H ∘ dW` rely on that nesting.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Number-like type an [`Expression`](super::Expression) can be evaluated over.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    /// Innermost real part.
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn powi(self, n: i32) -> Self;
    /// Power with a constant real exponent.
    fn powc(self, c: f64) -> Self;
    /// Power with a variable exponent, `exp(e ln self)`.
    fn powf(self, e: Self) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powc(self, c: f64) -> Self {
        f64::powf(self, c)
    }
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
}

/// `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual<T = f64> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }

    /// A variable seeded with derivative `d`.
    pub fn variable(re: T, d: f64) -> Self {
        Dual {
            re,
            eps: T::constant(d),
        }
    }

    fn chain(self, value: T, slope: T) -> Self {
        Dual {
            re: value,
            eps: slope * self.eps,
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn constant(v: f64) -> Self {
        Dual::new(T::constant(v), T::constant(0.0))
    }
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::constant(1.0) + t * t)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::constant(1.0) / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::constant(0.5) / s)
    }
    fn abs(self) -> Self {
        let sign = if self.re.re() > 0.0 {
            1.0
        } else if self.re.re() < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.re.abs(), T::constant(sign))
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = x.re * x.re + self.re * self.re;
        Dual::new(
            self.re.atan2(x.re),
            (x.re * self.eps - self.re * x.eps) / r2,
        )
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        let slope = T::constant(n as f64) * self.re.powi(n - 1);
        self.chain(self.re.powi(n), slope)
    }
    fn powc(self, c: f64) -> Self {
        if c == 0.0 {
            return Self::constant(1.0);
        }
        let slope = T::constant(c) * self.re.powc(c - 1.0);
        self.chain(self.re.powc(c), slope)
    }
    fn powf(self, e: Self) -> Self {
        let v = self.re.powf(e.re);
        let eps = v * (e.eps * self.re.ln() + e.re * self.eps / self.re);
        Dual::new(v, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_holds() {
        let u = Dual::new(3.0, 2.0);
        let v = Dual::new(-1.5, 0.25);
        let p = u * v;
        assert_eq!(p.re, -4.5);
        assert_eq!(p.eps, 3.0 * 0.25 + 2.0 * -1.5);
    }

    #[test]
    fn nested_dual_gives_second_derivative() {
        // f(x) = x^3 at x = 2: f'' = 12
        let x: Dual<Dual<f64>> = Dual::new(Dual::new(2.0, 1.0), Dual::new(1.0, 0.0));
        let f = x * x * x;
        assert_eq!(f.re.re, 8.0);
        assert_eq!(f.re.eps, 12.0);
        assert_eq!(f.eps.re, 12.0);
        assert_eq!(f.eps.eps, 12.0);
    }

    #[test]
    fn atan2_derivative_matches_closed_form() {
        // d/dt atan2(t, 1) = 1/(1+t²)
        let t = Dual::variable(0.5, 1.0);
        let a = t.atan2(Dual::constant(1.0));
        assert!((a.eps - 1.0 / 1.25).abs() < 1e-15);
    }

    #[test]
    fn abs_has_zero_slope_at_origin() {
        let a = Dual::variable(0.0, 1.0).abs();
        assert_eq!(a.eps, 0.0);
    }
}
