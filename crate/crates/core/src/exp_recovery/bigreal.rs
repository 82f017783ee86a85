//! Arbitrary-precision reals: a thin wrapper over a binary `dashu` float with
//! round-half-even at a per-value mantissa precision.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;

type Inner = FBig<HalfEven, 2>;

/// Results carry the larger precision of their operands.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BigReal(Inner);

impl BigReal {
    /// Exact conversion, then widened to `precision` bits.
    ///
    /// Panics on NaN or infinity.
    pub fn from_f64(v: f64, precision: usize) -> Self {
        let f = Inner::try_from(v).expect("finite f64");
        Self(f.with_precision(precision).value())
    }

    pub fn from_i64(v: i64, precision: usize) -> Self {
        Self(Inner::from(v).with_precision(precision).value())
    }

    pub fn zero(precision: usize) -> Self {
        Self::from_i64(0, precision)
    }

    pub fn one(precision: usize) -> Self {
        Self::from_i64(1, precision)
    }

    pub fn precision(&self) -> usize {
        self.0.precision()
    }

    /// Re-rounds (or exactly widens) to `precision` bits.
    pub fn with_precision(&self, precision: usize) -> Self {
        Self(self.0.clone().with_precision(precision).value())
    }

    /// Nearest double; overflows to infinity.
    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().value()
    }

    pub fn is_zero(&self) -> bool {
        self.0 == Inner::ZERO
    }

    pub fn is_positive(&self) -> bool {
        self.0 > Inner::ZERO
    }

    pub fn is_negative(&self) -> bool {
        self.0 < Inner::ZERO
    }

    pub fn abs(&self) -> Self {
        if self.is_negative() { -self.clone() } else { self.clone() }
    }

    /// Approximate `log2 |x|` (within one unit); `-inf` for zero.
    pub fn log2_magnitude(&self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        let r = self.0.repr();
        (r.exponent() as f64) + (r.digits() as f64)
    }

    pub fn exp(&self) -> Self {
        Self(self.0.exp())
    }

    pub fn exp_m1(&self) -> Self {
        Self(self.0.exp_m1())
    }

    /// Natural log; panics unless positive.
    pub fn ln(&self) -> Self {
        assert!(self.is_positive(), "ln of a non-positive value");
        Self(self.0.ln())
    }

    /// `ln(1 + x)`; panics unless `x > -1`.
    pub fn ln_1p(&self) -> Self {
        Self(self.0.ln_1p())
    }

    /// `ln |x|` as a double, without overflow for huge exponents.
    pub fn ln_abs_f64(&self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        let m = self.log2_magnitude();
        if m.abs() < 1000.0 {
            self.abs().ln().to_f64()
        } else {
            // mantissa contributes < 1 bit at this scale
            let r = self.0.repr();
            let lead = r.digits().min(60);
            let shift = r.digits() - lead;
            let top = Inner::from_parts(r.significand().clone() >> shift, 0).to_f64().value().abs();
            top.ln() + (r.exponent() as f64 + shift as f64) * std::f64::consts::LN_2
        }
    }
}

impl fmt::Debug for BigReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BigReal({:e} @{}b)", self.to_f64(), self.precision())
    }
}

impl fmt::Display for BigReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.to_decimal().value())
    }
}

impl PartialEq<f64> for BigReal {
    fn eq(&self, other: &f64) -> bool {
        self.partial_cmp(other) == Some(Ordering::Equal)
    }
}

impl PartialOrd<f64> for BigReal {
    fn partial_cmp(&self, other: &f64) -> Option<Ordering> {
        let o = Inner::try_from(*other).ok()?;
        Some(self.0.cmp(&o))
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident) => {
        impl $tr<&BigReal> for &BigReal {
            type Output = BigReal;
            fn $m(self, rhs: &BigReal) -> BigReal {
                BigReal($tr::$m(&self.0, &rhs.0))
            }
        }
        impl $tr<BigReal> for BigReal {
            type Output = BigReal;
            fn $m(self, rhs: BigReal) -> BigReal {
                BigReal($tr::$m(self.0, rhs.0))
            }
        }
        impl $tr<&BigReal> for BigReal {
            type Output = BigReal;
            fn $m(self, rhs: &BigReal) -> BigReal {
                BigReal($tr::$m(self.0, &rhs.0))
            }
        }
        impl $tr<BigReal> for &BigReal {
            type Output = BigReal;
            fn $m(self, rhs: BigReal) -> BigReal {
                BigReal($tr::$m(&self.0, rhs.0))
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Neg for BigReal {
    type Output = BigReal;
    fn neg(self) -> BigReal {
        BigReal(-self.0)
    }
}

impl Neg for &BigReal {
    type Output = BigReal;
    fn neg(self) -> BigReal {
        BigReal(-self.0.clone())
    }
}
