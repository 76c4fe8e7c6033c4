//! Exact rational numbers and outward-conservative rational intervals.
//!
//! Every measure-valued quantity in this crate is a `Rational` or an
//! `Interval`; no floating point enters any computation. Decimal renderings
//! exist only for report columns and are produced by exact long division.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Arbitrary-precision rational, always in lowest terms with positive
/// denominator (guaranteed by the underlying representation).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rational(BigRational);

impl Rational {
    pub fn new(numer: i64, denom: i64) -> Self {
        assert!(denom != 0, "zero denominator");
        Rational(BigRational::new(BigInt::from(numer), BigInt::from(denom)))
    }

    pub fn from_big(numer: BigInt, denom: BigInt) -> Self {
        assert!(!denom.is_zero(), "zero denominator");
        Rational(BigRational::new(numer, denom))
    }

    pub fn int(n: i64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn from_u64(n: u64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn zero() -> Self {
        Rational(BigRational::zero())
    }

    pub fn one() -> Self {
        Rational(BigRational::one())
    }

    pub fn numer(&self) -> &BigInt {
        self.0.numer()
    }

    pub fn denom(&self) -> &BigInt {
        self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn abs(&self) -> Self {
        Rational(self.0.abs())
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn recip(&self) -> Result<Self> {
        if self.is_zero() {
            return Err(Error::Internal("division by zero".into()));
        }
        Ok(Rational(self.0.recip()))
    }

    /// Largest integer not exceeding the value.
    pub fn floor_bigint(&self) -> BigInt {
        self.0.floor().to_integer()
    }

    /// Floor as i128; errors if out of range.
    pub fn floor_i128(&self) -> Result<i128> {
        self.floor_bigint()
            .to_i128()
            .ok_or_else(|| Error::Internal("floor exceeds i128 range".into()))
    }

    /// Exact integer value, if the rational is an integer fitting i128.
    pub fn to_i128_exact(&self) -> Option<i128> {
        if self.0.is_integer() {
            self.0.numer().to_i128()
        } else {
            None
        }
    }

    pub fn pow(&self, exp: u32) -> Self {
        let mut acc = Rational::one();
        for _ in 0..exp {
            acc = acc * self.clone();
        }
        acc
    }

    pub fn scale_u64(&self, n: u64) -> Self {
        Rational(&self.0 * BigInt::from(n))
    }

    /// Exact decimal rendering with `digits` places after the point,
    /// truncated toward zero. Deterministic; report use only.
    pub fn to_decimal(&self, digits: u32) -> String {
        let neg = self.0.is_negative();
        let a = self.0.abs();
        let scale = BigInt::from(10u32).pow(digits);
        let scaled = (a.numer() * &scale).div_floor(a.denom());
        let (int_part, frac_part) = scaled.div_rem(&scale);
        let frac_str = format!("{:0>width$}", frac_part.to_string(), width = digits as usize);
        let sign = if neg && (!int_part.is_zero() || !frac_part.is_zero()) {
            "-"
        } else {
            ""
        };
        format!("{}{}.{}", sign, int_part, frac_str)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl FromStr for Rational {
    type Err = Error;

    /// Accepts "p/q", integer "p", and exact decimal "0.75" forms.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("invalid rational: {s:?}"));
        if let Some((p, q)) = s.split_once('/') {
            let p: BigInt = p.trim().parse().map_err(|_| bad())?;
            let q: BigInt = q.trim().parse().map_err(|_| bad())?;
            if q.is_zero() {
                return Err(bad());
            }
            Ok(Rational(BigRational::new(p, q)))
        } else if let Some((int, frac)) = s.split_once('.') {
            let neg = int.trim_start().starts_with('-');
            let int: BigInt = if int.is_empty() || int == "-" {
                BigInt::zero()
            } else {
                int.parse().map_err(|_| bad())?
            };
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let scale = BigInt::from(10u32).pow(frac.len() as u32);
            let frac_int: BigInt = frac.parse().map_err(|_| bad())?;
            let numer = int.abs() * &scale + frac_int;
            let numer = if neg { -numer } else { numer };
            Ok(Rational(BigRational::new(numer, scale)))
        } else {
            let p: BigInt = s.parse().map_err(|_| bad())?;
            Ok(Rational(BigRational::from_integer(p)))
        }
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! forward_binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((self.0).$method(rhs.0))
            }
        }
        impl<'a> $trait<&'a Rational> for &'a Rational {
            type Output = Rational;
            fn $method(self, rhs: &'a Rational) -> Rational {
                Rational((&self.0).$method(&rhs.0))
            }
        }
    };
}

forward_binop!(Add, add);
forward_binop!(Sub, sub);
forward_binop!(Mul, mul);

impl Div for Rational {
    type Output = Rational;
    fn div(self, rhs: Rational) -> Rational {
        assert!(!rhs.0.is_zero(), "division by zero");
        Rational(self.0 / rhs.0)
    }
}

impl<'a> Div<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn div(self, rhs: &'a Rational) -> Rational {
        assert!(!rhs.0.is_zero(), "division by zero");
        Rational(&self.0 / &rhs.0)
    }
}

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-self.0)
    }
}

impl AddAssign for Rational {
    fn add_assign(&mut self, rhs: Rational) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Rational {
    fn sub_assign(&mut self, rhs: Rational) {
        self.0 -= rhs.0;
    }
}

impl Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |a, b| a + b)
    }
}

/// Closed rational interval `[lo, hi]`. Used for every quantity that a
/// finite-stage computation cannot pin exactly: the true value is certified
/// to lie inside. All arithmetic is outward-conservative.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Rational,
    pub hi: Rational,
}

impl Interval {
    pub fn new(lo: Rational, hi: Rational) -> Self {
        assert!(lo <= hi, "interval endpoints out of order: [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: Rational) -> Self {
        Interval {
            lo: v.clone(),
            hi: v,
        }
    }

    pub fn zero() -> Self {
        Interval::point(Rational::zero())
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn width(&self) -> Rational {
        &self.hi - &self.lo
    }

    pub fn contains(&self, v: &Rational) -> bool {
        &self.lo <= v && v <= &self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Widen the upper endpoint by a non-negative slack.
    pub fn widen_hi(&self, slack: &Rational) -> Interval {
        debug_assert!(!slack.is_negative());
        Interval::new(self.lo.clone(), &self.hi + slack)
    }

    /// Clamp into `[0, 1]` for measure-valued intervals.
    pub fn clamp_unit(&self) -> Interval {
        let lo = self.lo.clone().max(Rational::zero()).min(Rational::one());
        let hi = self.hi.clone().max(Rational::zero()).min(Rational::one());
        Interval::new(lo, hi)
    }

    pub fn add(&self, other: &Interval) -> Interval {
        Interval::new(&self.lo + &other.lo, &self.hi + &other.hi)
    }

    /// Outward subtraction: `[a.lo - b.hi, a.hi - b.lo]`.
    pub fn sub(&self, other: &Interval) -> Interval {
        Interval::new(&self.lo - &other.hi, &self.hi - &other.lo)
    }

    /// Scale by a non-negative exact factor.
    pub fn scale(&self, c: &Rational) -> Interval {
        assert!(!c.is_negative(), "interval scale by negative factor");
        Interval::new(c * &self.lo, c * &self.hi)
    }

    /// Product of two intervals known to be non-negative.
    pub fn mul_nonneg(&self, other: &Interval) -> Interval {
        debug_assert!(!self.lo.is_negative() && !other.lo.is_negative());
        Interval::new(&self.lo * &other.lo, &self.hi * &other.hi)
    }

    /// Certified upper bound on `|x - y|` over the two intervals.
    pub fn max_abs_diff(&self, other: &Interval) -> Rational {
        let a = &self.hi - &other.lo;
        let b = &other.hi - &self.lo;
        a.max(b).max(Rational::zero())
    }

    /// Certified lower bound on `|x - y|` over the two intervals
    /// (zero when the intervals overlap).
    pub fn min_abs_diff(&self, other: &Interval) -> Rational {
        let a = &self.lo - &other.hi;
        let b = &other.lo - &self.hi;
        a.max(b).max(Rational::zero())
    }

    /// Interval of `|x - y|` over the two intervals.
    pub fn abs_diff(&self, other: &Interval) -> Interval {
        Interval::new(self.min_abs_diff(other), self.max_abs_diff(other))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_point() {
            write!(f, "[{}]", self.lo)
        } else {
            write!(f, "[{}, {}]", self.lo, self.hi)
        }
    }
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl Sum for Interval {
    fn sum<I: Iterator<Item = Interval>>(iter: I) -> Interval {
        iter.fold(Interval::zero(), |a, b| a.add(&b))
    }
}

/// Convenience parser used all over the tests.
pub fn rat(s: &str) -> Rational {
    s.parse().expect("literal rational")
}
