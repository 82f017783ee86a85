//! Level-index numbers `exp^level(value)`.
//!
//! Sink outputs of depth-3 exponential networks are `exp(exp(exp(.)))` of
//! moderate arguments — far beyond any float exponent range. A [`Tower`]
//! keeps `level` exponentials symbolic; only values below `e^LIM` are held
//! directly. Arithmetic that mixes levels either reduces exactly to level-0
//! arithmetic on logarithms or is decided by negligibility.

use std::cmp::Ordering;

use thiserror::Error;

use super::bigreal::BigReal;

/// Values at level >= 1 are at least `2^LIM_LOG2`.
const LIM_LOG2: i64 = 20;
/// Level-0 values whose binary magnitude exceeds `LIM * log2(e)` (plus
/// hysteresis) are lifted.
const LIFT_LOG2: f64 = (1u64 << LIM_LOG2) as f64 * std::f64::consts::LOG2_E + 2.0;
/// Exponent arguments beyond this are treated as exact zero / overflow.
const EXP_ARG_CAP: f64 = (1u64 << 40) as f64;
/// Bits that must survive any cancellation.
pub const GUARD_BITS: f64 = 96.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TowerError {
    #[error("logarithm of a non-positive value")]
    NonPositive,
    #[error("precision exhausted: {needed:.0} bits needed, {available} available")]
    PrecisionExhausted { needed: f64, available: usize },
    #[error("value overflows the level-index range")]
    Overflow,
}

fn lim(precision: usize) -> BigReal {
    BigReal::from_i64(1 << LIM_LOG2, precision)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    level: u32,
    value: BigReal,
}

/// `ln(a - b)` together with how badly the subtraction conditions errors.
#[derive(Clone, Debug)]
pub struct LogDiff {
    pub log: Tower,
    /// `ln(|b| / (a - b))`: relative errors in `b` are multiplied by `e^amp`.
    pub amplification: f64,
    /// Leading bits cancelled in the subtraction.
    pub bits_lost: f64,
}

impl Tower {
    pub fn new(value: BigReal) -> Self {
        Self::canon(0, value)
    }

    pub fn from_f64(v: f64, precision: usize) -> Self {
        Self::new(BigReal::from_f64(v, precision))
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn value(&self) -> &BigReal {
        &self.value
    }

    pub fn precision(&self) -> usize {
        self.value.precision()
    }

    pub fn is_positive(&self) -> bool {
        self.level > 0 || self.value.is_positive()
    }

    fn canon(level: u32, value: BigReal) -> Self {
        let mut t = Tower { level, value };
        loop {
            if t.level > 0 && t.value < lim(t.value.precision()) {
                t = Tower { level: t.level - 1, value: t.value.exp() };
            } else if t.value.is_positive() && t.value.log2_magnitude() > LIFT_LOG2 {
                t = Tower { level: t.level + 1, value: t.value.ln() };
            } else {
                return t;
            }
        }
    }

    pub fn ln(&self) -> Result<Tower, TowerError> {
        if self.level > 0 {
            return Ok(Tower { level: self.level - 1, value: self.value.clone() });
        }
        if !self.value.is_positive() {
            return Err(TowerError::NonPositive);
        }
        Ok(Tower::canon(0, self.value.ln()))
    }

    /// `ln` applied `k` times.
    pub fn iterated_ln(&self, k: usize) -> Result<Tower, TowerError> {
        let mut t = self.clone();
        for _ in 0..k {
            t = t.ln()?;
        }
        Ok(t)
    }

    pub fn exp(&self) -> Tower {
        if self.level == 0 {
            let p = self.precision();
            if self.value < lim(p) {
                if self.value.to_f64() < -EXP_ARG_CAP {
                    return Tower::new(BigReal::zero(p));
                }
                return Tower::canon(0, self.value.exp());
            }
        }
        Tower { level: self.level + 1, value: self.value.clone() }
    }

    /// `e^s - 1`; above `e^LIM` the `-1` is far below any precision.
    pub fn exp_m1(&self) -> Tower {
        if self.level == 0 && self.value < lim(self.precision()) {
            if self.value.to_f64() < -EXP_ARG_CAP {
                return Tower::new(-BigReal::one(self.precision()));
            }
            return Tower::canon(0, self.value.exp_m1());
        }
        self.exp()
    }

    /// `exp^k` argument of `self` at level `k >= self.level`, or `None` when
    /// the value is too small to be lifted (non-positive on the way).
    fn lift_to(&self, k: u32) -> Option<BigReal> {
        let mut v = self.value.clone();
        for _ in self.level..k {
            if !v.is_positive() {
                return None;
            }
            v = v.ln();
        }
        Some(v)
    }

    pub fn compare(&self, other: &Tower) -> Ordering {
        if self.level == 0 && other.level == 0 {
            return self.value.cmp(&other.value);
        }
        let k = self.level.max(other.level);
        match (self.lift_to(k), other.lift_to(k)) {
            (Some(a), Some(b)) => a.cmp(&b),
            (Some(_), None) => Ordering::Greater,
            (None, Some(_)) => Ordering::Less,
            (None, None) => self.value.cmp(&other.value),
        }
    }

    /// `w * self` for `w > 0`.
    pub fn scale(&self, w: &BigReal) -> Tower {
        if self.level == 0 {
            return Tower::canon(0, w * &self.value);
        }
        if self.level == 1 {
            let lw = w.with_precision(self.precision()).ln();
            return Tower::new(&self.value + lw).exp();
        }
        // a finite factor is below the resolution of level >= 2
        self.clone()
    }

    /// Sum of two non-negative towers (level-0 operands of any sign).
    pub fn add(&self, other: &Tower) -> Tower {
        if self.level == 0 && other.level == 0 {
            return Tower::canon(0, &self.value + &other.value);
        }
        let (hi, lo) = if self.compare(other) == Ordering::Less { (other, self) } else { (self, other) };
        let k = hi.level;
        let Some(vl) = lo.lift_to(k) else {
            return hi.clone();
        };
        if k == 1 {
            let p = hi.precision().max(lo.precision());
            let d = &vl - &hi.value;
            if d.to_f64() < -((p + 16) as f64) * std::f64::consts::LN_2 {
                return hi.clone();
            }
            let r = &hi.value + d.exp().ln_1p();
            return Tower::new(r).exp();
        }
        hi.clone()
    }

    /// `ln(self - other)`, with the conditioning of the subtraction.
    pub fn log_sub(&self, other: &Tower) -> Result<LogDiff, TowerError> {
        let p = self.precision().max(other.precision());
        if self.level == 0 && other.level == 0 {
            let (a, b) = (&self.value, &other.value);
            let d = a - b;
            if !d.is_positive() {
                return Err(TowerError::NonPositive);
            }
            let (amplification, bits_lost) = if b.is_zero() {
                (f64::NEG_INFINITY, 0.0)
            } else {
                (
                    b.ln_abs_f64() - d.ln_abs_f64(),
                    (a.log2_magnitude().max(b.log2_magnitude()) - d.log2_magnitude()).max(0.0),
                )
            };
            return Ok(LogDiff { log: Tower::canon(0, d.ln()), amplification, bits_lost });
        }
        if other.level == 0 && !other.value.is_positive() {
            // subtracting a non-positive number is an addition
            let sum = self.add(&Tower::new(-&other.value));
            let amplification = other.value.ln_abs_f64() - sum.ln_magnitude();
            return Ok(LogDiff { log: sum.ln()?, amplification, bits_lost: 0.0 });
        }
        let k = self.level.max(other.level);
        let va = self.lift_to(k).ok_or(TowerError::NonPositive)?;
        let vb = other.lift_to(k).ok_or(TowerError::NonPositive)?;
        if va <= vb {
            return Err(if va == vb {
                TowerError::PrecisionExhausted { needed: f64::INFINITY, available: p }
            } else {
                TowerError::NonPositive
            });
        }
        let delta = &va - &vb;
        let bits_lost = (va.log2_magnitude().max(vb.log2_magnitude()) - delta.log2_magnitude()).max(0.0);
        if k == 1 {
            let df = delta.to_f64();
            let (log, amplification) = if df > EXP_ARG_CAP {
                (Tower::new(va), -df)
            } else {
                let corr = (-(-&delta).exp_m1()).ln();
                let amp = if df > 700.0 { -df } else { -delta.exp_m1().ln().to_f64() };
                (Tower::new(&va + corr), amp)
            };
            return Ok(LogDiff { log, amplification, bits_lost });
        }
        // level >= 2: the smaller operand is astronomically negligible, as
        // long as the two are actually resolved apart
        if bits_lost > p as f64 - GUARD_BITS {
            return Err(TowerError::PrecisionExhausted { needed: bits_lost + GUARD_BITS, available: p });
        }
        Ok(LogDiff { log: Tower::canon(k - 1, va), amplification: f64::NEG_INFINITY, bits_lost: 0.0 })
    }

    /// `self / other` as a plain number; astronomically small ratios are 0.
    pub fn ratio(&self, other: &Tower) -> Result<BigReal, TowerError> {
        let p = self.precision().max(other.precision());
        if self.level == 0 && other.level == 0 {
            if other.value.is_zero() {
                return Err(TowerError::Overflow);
            }
            return Ok(&self.value / &other.value);
        }
        let k = self.level.max(other.level);
        let (Some(va), Some(vb)) = (self.lift_to(k), other.lift_to(k)) else {
            return if other.level > self.level { Ok(BigReal::zero(p)) } else { Err(TowerError::Overflow) };
        };
        if k == 1 {
            let m = va.log2_magnitude().max(vb.log2_magnitude());
            if m > p as f64 - GUARD_BITS {
                return Err(TowerError::PrecisionExhausted { needed: m + GUARD_BITS, available: p });
            }
            let d = &va - &vb;
            let df = d.to_f64();
            if df > EXP_ARG_CAP {
                return Err(TowerError::Overflow);
            }
            if df < -EXP_ARG_CAP {
                return Ok(BigReal::zero(p));
            }
            return Ok(d.exp());
        }
        match va.cmp(&vb) {
            Ordering::Less => Ok(BigReal::zero(p)),
            Ordering::Equal => Err(TowerError::PrecisionExhausted { needed: f64::INFINITY, available: p }),
            Ordering::Greater => Err(TowerError::Overflow),
        }
    }

    /// `ln |self|` as a double (`+inf` beyond double range).
    pub fn ln_magnitude(&self) -> f64 {
        match self.level {
            0 => self.value.ln_abs_f64(),
            1 => self.value.to_f64(),
            _ => f64::INFINITY,
        }
    }

    /// Nearest double (`+inf` for level >= 1).
    pub fn to_f64(&self) -> f64 {
        if self.level == 0 { self.value.to_f64() } else { f64::INFINITY }
    }

    /// Raises (or re-rounds) the working precision.
    pub fn with_precision(&self, precision: usize) -> Tower {
        Tower { level: self.level, value: self.value.with_precision(precision) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: usize = 256;

    fn t(v: f64) -> Tower {
        Tower::from_f64(v, P)
    }

    #[test]
    fn exp_ln_roundtrip_through_levels() {
        let x = t(3.0);
        let e3 = x.exp().exp().exp();
        assert_eq!(e3.level(), 1);
        assert!((e3.value().to_f64() - 3f64.exp().exp()).abs() < 1e-6);
        let back = e3.iterated_ln(3).unwrap();
        assert_eq!(back.level(), 0);
        assert!((back.to_f64() - 3.0).abs() < 1e-60);
        let deep = e3.exp().exp();
        assert_eq!(deep.level(), 3);
        assert!((deep.iterated_ln(5).unwrap().to_f64() - 3.0).abs() < 1e-60);
    }

    #[test]
    fn arithmetic_matches_doubles_at_level0() {
        let (a, b) = (t(5.5), t(2.25));
        assert_eq!(a.add(&b).to_f64(), 7.75);
        assert_eq!(a.scale(&BigReal::from_f64(2.0, P)).to_f64(), 11.0);
        let d = a.log_sub(&b).unwrap();
        assert!((d.log.to_f64() - 3.25f64.ln()).abs() < 1e-15);
        assert!((d.amplification - (2.25f64 / 3.25).ln()).abs() < 1e-12);
        assert!((a.ratio(&b).unwrap().to_f64() - 5.5 / 2.25).abs() < 1e-15);
        assert_eq!(b.log_sub(&a).unwrap_err(), TowerError::NonPositive);
    }

    #[test]
    fn level1_arithmetic_is_log_exact() {
        // e^2000000 and e^1999999
        let a = t(2_000_000.0).exp();
        let b = t(1_999_999.0).exp();
        assert_eq!(a.level(), 1);
        let s = a.add(&b).ln().unwrap().to_f64();
        assert!((s - (2_000_000.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-9);
        let d = a.log_sub(&b).unwrap();
        assert!((d.log.to_f64() - (2_000_000.0 + (1.0 - (-1f64).exp()).ln())).abs() < 1e-9);
        assert!((d.amplification + 1f64.exp_m1().ln()).abs() < 1e-12);
        assert!((a.ratio(&b).unwrap().to_f64() - 1f64.exp()).abs() < 1e-12);
        assert_eq!(b.ratio(&t(1e300).exp().exp()).unwrap().to_f64(), 0.0);
        let w = a.scale(&BigReal::from_f64(2.0, P));
        assert!((w.ln().unwrap().to_f64() - 2_000_000.0 - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ordering_across_levels() {
        let small = t(1e300);
        let big = t(3.0).exp().exp().exp();
        assert_eq!(small.compare(&big), Ordering::Less);
        assert_eq!(big.compare(&small), Ordering::Greater);
        assert_eq!(t(-1.0).compare(&big), Ordering::Less);
        assert_eq!(big.add(&small), big);
    }

    #[test]
    fn cancellation_is_detected() {
        // equal level-2 towers cannot be subtracted
        let a = t(1e10).exp().exp();
        assert!(matches!(a.log_sub(&a.clone()), Err(TowerError::PrecisionExhausted { .. })));
        // level-1 ratio of huge logs needs more bits than available
        let h = Tower::new(BigReal::from_f64(1e100, P)).exp();
        assert!(matches!(h.ratio(&h), Err(TowerError::PrecisionExhausted { .. })));
    }

    #[test]
    fn expm1_small_and_large() {
        assert!((t(1e-20).exp_m1().to_f64() - 1e-20).abs() < 1e-36);
        assert_eq!(t(-1e20).exp_m1().to_f64(), -1.0);
        assert_eq!(t(5e6).exp_m1().level(), 1);
    }
}
