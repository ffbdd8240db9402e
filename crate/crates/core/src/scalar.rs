//! Field abstraction shared by the exact and floating-point code paths.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A real field closed under the operations Haar analysis needs: ring
/// operations, division, and the square roots `2^{e/2}` that appear in Haar
/// normalizations `|I|^{±1/2}` and extremal shift coefficients.
pub trait Scalar:
    nalgebra::Scalar
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
{
    /// `true` when arithmetic is exact and comparisons need no tolerance.
    const EXACT: bool;

    fn from_i64(v: i64) -> Self;

    /// Exact for [`Exact`] (every finite `f64` is a dyadic rational).
    fn from_f64(v: f64) -> Self;

    fn to_f64(&self) -> f64;

    /// `2^e`.
    fn pow2(e: i32) -> Self;

    /// `2^{e/2}`.
    fn sqrt2_pow(e: i32) -> Self;

    fn sign(&self) -> Ordering;

    fn abs(&self) -> Self {
        if self.sign() == Ordering::Less {
            -self.clone()
        } else {
            self.clone()
        }
    }

    /// Zero test used by invariant checks: exact for [`Exact`], relative to
    /// `scale` for `f64`.
    fn is_negligible(&self, scale: f64) -> bool;

    fn max_of(self, other: Self) -> Self {
        if (other.clone() - self.clone()).sign() == Ordering::Greater {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn pow2(e: i32) -> Self {
        2f64.powi(e)
    }

    fn sqrt2_pow(e: i32) -> Self {
        if e % 2 == 0 {
            2f64.powi(e / 2)
        } else {
            2f64.powi((e - 1).div_euclid(2)) * std::f64::consts::SQRT_2
        }
    }

    fn sign(&self) -> Ordering {
        self.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
    }

    fn abs(&self) -> Self {
        f64::abs(*self)
    }

    fn is_negligible(&self, scale: f64) -> bool {
        f64::abs(*self) <= 1e-12 * scale.max(1.0)
    }
}

/// Exact element `rat + surd·√2` of the field ℚ(√2).
///
/// Dyadic averages are rational, Haar coefficients pick up `|I|^{1/2}`, and
/// extremal shift coefficients are `±2^{-(m+n)/2}`; all of these live in
/// ℚ(√2), so every identity of the Haar calculus can be checked with zero
/// tolerance.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Exact {
    rat: BigRational,
    surd: BigRational,
}

impl Exact {
    pub fn new(rat: BigRational, surd: BigRational) -> Self {
        Self { rat, surd }
    }

    pub fn rational(n: i64, d: i64) -> Self {
        Self {
            rat: BigRational::new(BigInt::from(n), BigInt::from(d)),
            surd: BigRational::zero(),
        }
    }

    pub fn rational_part(&self) -> &BigRational {
        &self.rat
    }

    pub fn surd_part(&self) -> &BigRational {
        &self.surd
    }

    pub fn is_rational(&self) -> bool {
        self.surd.is_zero()
    }

    fn big_pow2(e: i32) -> BigRational {
        let mag = BigInt::one() << e.unsigned_abs() as usize;
        if e >= 0 {
            BigRational::from_integer(mag)
        } else {
            BigRational::new(BigInt::one(), mag)
        }
    }
}

impl fmt::Debug for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.surd.is_zero() {
            write!(f, "{}", self.rat)
        } else {
            write!(f, "{}+({})r2", self.rat, self.surd)
        }
    }
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.rat.to_string(), self.surd.to_string()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (rat, surd) = <(String, String)>::deserialize(d)?;
        let rat = BigRational::from_str(&rat).map_err(serde::de::Error::custom)?;
        let surd = BigRational::from_str(&surd).map_err(serde::de::Error::custom)?;
        Ok(Self { rat, surd })
    }
}

impl Zero for Exact {
    fn zero() -> Self {
        Self {
            rat: BigRational::zero(),
            surd: BigRational::zero(),
        }
    }

    fn is_zero(&self) -> bool {
        self.rat.is_zero() && self.surd.is_zero()
    }
}

impl One for Exact {
    fn one() -> Self {
        Self {
            rat: BigRational::one(),
            surd: BigRational::zero(),
        }
    }
}

impl Add for Exact {
    type Output = Exact;
    fn add(mut self, rhs: Exact) -> Exact {
        self += rhs;
        self
    }
}

impl AddAssign for Exact {
    fn add_assign(&mut self, rhs: Exact) {
        self.rat += rhs.rat;
        if !rhs.surd.is_zero() {
            self.surd += rhs.surd;
        }
    }
}

impl Sub for Exact {
    type Output = Exact;
    fn sub(mut self, rhs: Exact) -> Exact {
        self -= rhs;
        self
    }
}

impl SubAssign for Exact {
    fn sub_assign(&mut self, rhs: Exact) {
        self.rat -= rhs.rat;
        if !rhs.surd.is_zero() {
            self.surd -= rhs.surd;
        }
    }
}

impl Neg for Exact {
    type Output = Exact;
    fn neg(self) -> Exact {
        Exact {
            rat: -self.rat,
            surd: -self.surd,
        }
    }
}

impl Mul for Exact {
    type Output = Exact;
    fn mul(self, rhs: Exact) -> Exact {
        match (self.surd.is_zero(), rhs.surd.is_zero()) {
            (true, true) => Exact {
                rat: self.rat * rhs.rat,
                surd: BigRational::zero(),
            },
            (true, false) => Exact {
                surd: &self.rat * rhs.surd,
                rat: self.rat * rhs.rat,
            },
            (false, true) => Exact {
                surd: self.surd * &rhs.rat,
                rat: self.rat * rhs.rat,
            },
            (false, false) => {
                let two = BigRational::from_integer(BigInt::from(2));
                Exact {
                    rat: &self.rat * &rhs.rat + two * (&self.surd * &rhs.surd),
                    surd: self.rat * rhs.surd + self.surd * rhs.rat,
                }
            }
        }
    }
}

impl MulAssign for Exact {
    fn mul_assign(&mut self, rhs: Exact) {
        let lhs = std::mem::replace(self, Exact::zero());
        *self = lhs * rhs;
    }
}

impl Div for Exact {
    type Output = Exact;
    /// Rationalizes the denominator; panics on division by zero like the
    /// underlying big-rational type.
    fn div(self, rhs: Exact) -> Exact {
        if rhs.surd.is_zero() {
            return Exact {
                rat: self.rat / &rhs.rat,
                surd: self.surd / rhs.rat,
            };
        }
        let two = BigRational::from_integer(BigInt::from(2));
        let norm = &rhs.rat * &rhs.rat - two * (&rhs.surd * &rhs.surd);
        let conj = Exact {
            rat: rhs.rat / &norm,
            surd: -(rhs.surd / norm),
        };
        self * conj
    }
}

impl DivAssign for Exact {
    fn div_assign(&mut self, rhs: Exact) {
        let lhs = std::mem::replace(self, Exact::zero());
        *self = lhs / rhs;
    }
}

impl Scalar for Exact {
    const EXACT: bool = true;

    fn from_i64(v: i64) -> Self {
        Exact {
            rat: BigRational::from_integer(BigInt::from(v)),
            surd: BigRational::zero(),
        }
    }

    fn from_f64(v: f64) -> Self {
        Exact {
            rat: BigRational::from_float(v).expect("finite float"),
            surd: BigRational::zero(),
        }
    }

    fn to_f64(&self) -> f64 {
        let r = self.rat.to_f64().unwrap_or(f64::NAN);
        if self.surd.is_zero() {
            r
        } else {
            r + self.surd.to_f64().unwrap_or(f64::NAN) * std::f64::consts::SQRT_2
        }
    }

    fn pow2(e: i32) -> Self {
        Exact {
            rat: Self::big_pow2(e),
            surd: BigRational::zero(),
        }
    }

    fn sqrt2_pow(e: i32) -> Self {
        if e % 2 == 0 {
            Self::pow2(e / 2)
        } else {
            Exact {
                rat: BigRational::zero(),
                surd: Self::big_pow2((e - 1).div_euclid(2)),
            }
        }
    }

    fn sign(&self) -> Ordering {
        let s = sign_of(&self.rat);
        let t = sign_of(&self.surd);
        if t == Ordering::Equal || s == t {
            return if s == Ordering::Equal { t } else { s };
        }
        if s == Ordering::Equal {
            return t;
        }
        // Opposite signs: compare rat^2 against 2 surd^2.
        let two = BigRational::from_integer(BigInt::from(2));
        let lhs = &self.rat * &self.rat;
        let rhs = two * (&self.surd * &self.surd);
        match lhs.cmp(&rhs) {
            Ordering::Greater => s,
            Ordering::Less => t,
            Ordering::Equal => Ordering::Equal,
        }
    }

    fn is_negligible(&self, _scale: f64) -> bool {
        self.is_zero()
    }
}

fn sign_of(r: &BigRational) -> Ordering {
    if r.is_zero() {
        Ordering::Equal
    } else if r.is_positive() {
        Ordering::Greater
    } else {
        Ordering::Less
    }
}

/// Exact `a <= b`.
pub(crate) fn le<T: Scalar>(a: &T, b: &T) -> bool {
    (b.clone() - a.clone()).sign() != Ordering::Less
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sqrt2_powers_square_to_powers_of_two() {
        for e in -9..9 {
            let r = Exact::sqrt2_pow(e);
            assert_eq!(r.clone() * r, Exact::pow2(e), "e = {e}");
            let f = f64::sqrt2_pow(e);
            assert!((f * f - 2f64.powi(e)).abs() <= 1e-15 * 2f64.powi(e));
        }
        assert_eq!(Exact::sqrt2_pow(-1).to_string(), "0+(1/2)r2");
    }

    #[test]
    fn sign_of_mixed_surds() {
        // 3 - 2√2 ≈ 0.17 > 0, 1 - √2 < 0
        let a = Exact::new(
            BigRational::from_integer(3.into()),
            BigRational::from_integer((-2).into()),
        );
        assert_eq!(a.sign(), Ordering::Greater);
        let b = Exact::new(BigRational::one(), -BigRational::one());
        assert_eq!(b.sign(), Ordering::Less);
        assert_eq!(Exact::zero().sign(), Ordering::Equal);
    }

    #[test]
    fn division_rationalizes() {
        let s = Exact::sqrt2_pow(1);
        let one = Exact::one();
        let inv = one.clone() / s.clone();
        assert_eq!(inv.clone() * s, one);
        assert_eq!(inv, Exact::sqrt2_pow(-1));
    }

    #[test]
    fn serde_round_trip() {
        let x = Exact::rational(-3, 8) + Exact::sqrt2_pow(-3);
        let json = serde_json::to_string(&x).unwrap();
        assert_eq!(json, r#"["-3/8","1/4"]"#);
        let back: Exact = serde_json::from_str(&json).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn field_ops_agree_with_f64(a in -50i64..50, b in -50i64..50, c in 1i64..20, e in -6i32..6) {
            let x = Exact::rational(a, c) + Exact::from_i64(b) * Exact::sqrt2_pow(e);
            let y = Exact::rational(b, c) - Exact::sqrt2_pow(e + 1);
            let xf = x.to_f64();
            let yf = y.to_f64();
            prop_assert!(((x.clone() * y.clone()).to_f64() - xf * yf).abs() <= 1e-9 * (1.0 + (xf * yf).abs()));
            prop_assert!(((x.clone() - y.clone()).to_f64() - (xf - yf)).abs() <= 1e-9 * (1.0 + xf.abs() + yf.abs()));
            if !y.is_zero() {
                prop_assert_eq!((x.clone() / y.clone()) * y.clone(), x.clone());
            }
            let expected = if (xf - yf).abs() < 1e-9 { None } else { Some(xf > yf) };
            if let Some(gt) = expected {
                prop_assert_eq!((x - y).sign() == Ordering::Greater, gt);
            }
        }
    }
}
