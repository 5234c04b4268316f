//! IEEE binary128 as a core scalar, for finite-difference references that
//! f64 round-off would swamp. Every operation forwards to libquadmath.

use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use f128::f128;
use mergelab_core::Real;
use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub struct Quad(pub f128);

impl fmt::Debug for Quad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Quad({:e})", self.as_f64())
    }
}

impl fmt::Display for Quad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.as_f64(), f)
    }
}

impl Default for Quad {
    fn default() -> Self {
        Quad::zero()
    }
}

macro_rules! binary {
    ($tr:ident $m:ident $atr:ident $am:ident) => {
        impl $tr for Quad {
            type Output = Quad;
            #[inline]
            fn $m(self, rhs: Quad) -> Quad {
                Quad(self.0.$m(rhs.0))
            }
        }
        impl $atr for Quad {
            #[inline]
            fn $am(&mut self, rhs: Quad) {
                self.0 = self.0.$m(rhs.0);
            }
        }
    };
}

binary!(Add add AddAssign add_assign);
binary!(Sub sub SubAssign sub_assign);
binary!(Mul mul MulAssign mul_assign);
binary!(Div div DivAssign div_assign);
binary!(Rem rem RemAssign rem_assign);

impl Neg for Quad {
    type Output = Quad;
    fn neg(self) -> Quad {
        Quad(-self.0)
    }
}

impl Sum for Quad {
    fn sum<I: Iterator<Item = Quad>>(iter: I) -> Quad {
        iter.fold(Quad::zero(), |a, b| a + b)
    }
}

impl Zero for Quad {
    fn zero() -> Self {
        Quad(f128::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for Quad {
    fn one() -> Self {
        Quad(f128::one())
    }
}

impl Num for Quad {
    type FromStrRadixErr = <f128 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f128::from_str_radix(s, radix).map(Quad)
    }
}

impl ToPrimitive for Quad {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.0.to_f64()
    }
}

impl FromPrimitive for Quad {
    fn from_i64(n: i64) -> Option<Self> {
        <f128 as FromPrimitive>::from_i64(n).map(Quad)
    }
    fn from_u64(n: u64) -> Option<Self> {
        <f128 as FromPrimitive>::from_u64(n).map(Quad)
    }
    fn from_f32(n: f32) -> Option<Self> {
        Some(Quad(<f128 as From<f64>>::from(n as f64)))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Quad(<f128 as From<f64>>::from(n)))
    }
}

impl NumCast for Quad {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <f128 as NumCast>::from(n).map(Quad)
    }
}

macro_rules! unary {
    ($($m:ident),*) => {
        $(#[inline] fn $m(self) -> Self { Quad(self.0.$m()) })*
    };
}

macro_rules! predicate {
    ($($m:ident),*) => {
        $(#[inline] fn $m(self) -> bool { self.0.$m() })*
    };
}

macro_rules! constant {
    ($($m:ident),*) => {
        $(#[inline] fn $m() -> Self { Quad(f128::$m()) })*
    };
}

impl Float for Quad {
    constant!(nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value);
    predicate!(is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);
    unary!(
        floor, ceil, round, trunc, fract, abs, signum, recip, sqrt, exp, exp2, ln, log2, log10, cbrt, sin, cos,
        tan, asin, acos, atan, exp_m1, ln_1p, sinh, cosh, tanh, asinh, acosh, atanh
    );

    fn classify(self) -> FpCategory {
        self.0.classify()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        Quad(self.0.mul_add(a.0, b.0))
    }
    fn powi(self, n: i32) -> Self {
        Quad(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        Quad(self.0.powf(n.0))
    }
    fn log(self, base: Self) -> Self {
        Quad(self.0.log(base.0))
    }
    fn max(self, other: Self) -> Self {
        Quad(self.0.max(other.0))
    }
    fn min(self, other: Self) -> Self {
        Quad(self.0.min(other.0))
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        Quad(self.0.abs_sub(other.0))
    }
    fn hypot(self, other: Self) -> Self {
        Quad(self.0.hypot(other.0))
    }
    fn atan2(self, other: Self) -> Self {
        Quad(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.0.sin_cos();
        (Quad(s), Quad(c))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.integer_decode()
    }
}

impl Real for Quad {
    fn of(x: f64) -> Self {
        Quad(<f128 as From<f64>>::from(x))
    }

    fn as_f64(self) -> f64 {
        self.0.to_f64().expect("binary128 narrows to f64")
    }
}
