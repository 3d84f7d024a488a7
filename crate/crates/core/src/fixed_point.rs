//! Fixed-point encoding of reals and the bookkeeping of amplifying factors.
//!
//! A real `x` is carried as the integer `round(x · S)` for an amplifying
//! factor `S`. Rounding is half-away-from-zero and computed exactly from the
//! binary expansion of the `f64`, so large factors never drift. Products of
//! weights and pooled sums only ever multiply the factor; nothing is
//! rescaled mid-network.

use std::fmt;
use std::ops::Mul;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::paillier::PublicKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("amplifying factor must be a positive integer")]
    ZeroScale,
    #[error("`{0}` is not a decimal amplifying factor")]
    BadScale(String),
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("magnitude bound of {bound_bits} bits does not fit a {key_bits}-bit modulus (need 2·B + 1 < N)")]
    Overflow { bound_bits: u64, key_bits: u64 },
}

/// A positive integer amplifying factor.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scale(BigUint);

impl Scale {
    pub fn new(factor: BigUint) -> Result<Self, FixedPointError> {
        if factor.is_zero() {
            return Err(FixedPointError::ZeroScale);
        }
        Ok(Scale(factor))
    }

    pub fn one() -> Self {
        Scale(BigUint::one())
    }

    pub fn from_u64(factor: u64) -> Result<Self, FixedPointError> {
        Self::new(BigUint::from(factor))
    }

    /// `2^bits`
    pub fn power_of_two(bits: u32) -> Self {
        Scale(BigUint::one() << bits)
    }

    pub fn factor(&self) -> &BigUint {
        &self.0
    }
}

impl fmt::Debug for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scale({})", self.0)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Scale {
    type Err = FixedPointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(FixedPointError::BadScale(s.to_string()));
        }
        let v: BigUint = s.parse().map_err(|_| FixedPointError::BadScale(s.to_string()))?;
        Scale::new(v)
    }
}

impl Mul for &Scale {
    type Output = Scale;

    fn mul(self, rhs: &Scale) -> Scale {
        Scale(&self.0 * &rhs.0)
    }
}

/// A signed integer standing for `raw / scale`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaledInt {
    pub raw: BigInt,
    pub scale: Scale,
}

impl ScaledInt {
    /// Errors when `raw` would not survive the signed encoding under `pk`.
    pub fn check_fits(&self, pk: &PublicKey) -> Result<(), FixedPointError> {
        check_bound(self.raw.magnitude(), pk)
    }
}

/// `round_half_away_from_zero(x · factor)`, computed exactly.
pub fn round_scaled(x: f64, factor: &BigUint) -> Result<BigInt, FixedPointError> {
    if !x.is_finite() {
        return Err(FixedPointError::NonFinite(x));
    }
    if x == 0.0 {
        return Ok(BigInt::zero());
    }
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let fraction = bits & ((1u64 << 52) - 1);
    // x = ±mantissa · 2^exponent
    let (mantissa, exponent) = if biased == 0 {
        (fraction, -1074)
    } else {
        (fraction | (1u64 << 52), biased - 1075)
    };

    let product = BigUint::from(mantissa) * factor;
    let magnitude = if exponent >= 0 {
        product << exponent as u64
    } else {
        let shift = (-exponent) as u64;
        let quotient = &product >> shift;
        let remainder = &product - (&quotient << shift);
        // remainder >= 2^(shift - 1)  <=>  fractional part >= 1/2
        if remainder.bits() == shift {
            quotient + 1u32
        } else {
            quotient
        }
    };
    let sign = if negative { Sign::Minus } else { Sign::Plus };
    Ok(BigInt::from_biguint(sign, magnitude))
}

pub fn encode_real(x: f64, scale: &Scale) -> Result<ScaledInt, FixedPointError> {
    Ok(ScaledInt { raw: round_scaled(x, scale.factor())?, scale: scale.clone() })
}

/// [`encode_real`] followed by the signed-range check for `pk`.
pub fn encode_real_for_key(
    x: f64,
    scale: &Scale,
    pk: &PublicKey,
) -> Result<ScaledInt, FixedPointError> {
    let v = encode_real(x, scale)?;
    v.check_fits(pk)?;
    Ok(v)
}

pub fn decode_real(v: &ScaledInt) -> f64 {
    ratio_to_f64(&v.raw, v.scale.factor())
}

/// `num / den` as the nearest-ish `f64`, staying finite when both sides
/// exceed the `f64` range.
pub fn ratio_to_f64(num: &BigInt, den: &BigUint) -> f64 {
    let excess = num.bits().max(den.bits()).saturating_sub(1000);
    let n = (num >> excess).to_f64().unwrap_or(f64::NAN);
    let d = (den >> excess).to_f64().unwrap_or(f64::NAN);
    n / d
}

/// Input factor plus the product of every stage factor applied since.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleState {
    pub input_scale: Scale,
    pub accumulated: Scale,
}

impl ScaleState {
    pub fn new(input_scale: Scale) -> Self {
        Self { input_scale, accumulated: Scale::one() }
    }

    /// Multiplies a weight scale or pooling divisor into the state.
    pub fn compose(&self, stage_factor: &Scale) -> Self {
        Self {
            input_scale: self.input_scale.clone(),
            accumulated: &self.accumulated * stage_factor,
        }
    }

    /// Factor relating a raw value at this point to its real value.
    pub fn total(&self) -> Scale {
        &self.input_scale * &self.accumulated
    }

    pub fn decode(&self, raw: &BigInt) -> f64 {
        ratio_to_f64(raw, self.total().factor())
    }
}

/// Ok iff `2·bound + 1 < N`.
pub fn check_bound(bound: &BigUint, pk: &PublicKey) -> Result<(), FixedPointError> {
    if pk.admits_magnitude(bound) {
        Ok(())
    } else {
        Err(FixedPointError::Overflow { bound_bits: bound.bits(), key_bits: pk.bits() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::PrivateKey;
    use proptest::prelude::*;

    fn s(v: u64) -> Scale {
        Scale::from_u64(v).unwrap()
    }

    fn toy_pk() -> PublicKey {
        PrivateKey::from_primes(5u32.into(), 7u32.into()).unwrap().public().clone()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_real(0.5, &s(100)).unwrap().raw, BigInt::from(50));
        assert_eq!(encode_real(-0.015, &s(1000)).unwrap().raw, BigInt::from(-15));
        assert_eq!(encode_real(0.0, &s(12345)).unwrap().raw, BigInt::zero());
        assert_eq!(encode_real(-0.0, &s(7)).unwrap().raw, BigInt::zero());
    }

    #[test]
    fn half_rounds_away_from_zero() {
        assert_eq!(round_scaled(0.25, &BigUint::from(2u32)).unwrap(), BigInt::from(1));
        assert_eq!(round_scaled(-0.25, &BigUint::from(2u32)).unwrap(), BigInt::from(-1));
        assert_eq!(round_scaled(2.5, &BigUint::one()).unwrap(), BigInt::from(3));
        assert_eq!(round_scaled(-2.5, &BigUint::one()).unwrap(), BigInt::from(-3));
        assert_eq!(round_scaled(2.4999, &BigUint::one()).unwrap(), BigInt::from(2));
    }

    #[test]
    fn huge_scale_stays_exact() {
        let factor = BigUint::one() << 300u32;
        let raw = round_scaled(0.75, &factor).unwrap();
        assert_eq!(raw, BigInt::from(3) * (BigInt::one() << 298u32));
        assert_eq!(decode_real(&ScaledInt { raw, scale: Scale(factor) }), 0.75);
    }

    #[test]
    fn subnormals_and_non_finite() {
        assert_eq!(round_scaled(f64::MIN_POSITIVE / 4.0, &BigUint::one()).unwrap(), BigInt::zero());
        assert!(matches!(round_scaled(f64::NAN, &BigUint::one()), Err(FixedPointError::NonFinite(_))));
        assert!(round_scaled(f64::INFINITY, &BigUint::one()).is_err());
    }

    #[test]
    fn decode_examples() {
        let v = ScaledInt { raw: BigInt::from(50), scale: s(100) };
        assert_eq!(decode_real(&v), 0.5);
        let v = ScaledInt { raw: BigInt::from(10), scale: s(4) };
        assert_eq!(decode_real(&v), 2.5);
    }

    #[test]
    fn compose_examples() {
        let state = ScaleState::new(Scale::one());
        let w = Scale::power_of_two(16);
        assert_eq!(state.compose(&w).accumulated, w);
        let a = state.compose(&s(3)).compose(&s(7));
        let b = state.compose(&s(7)).compose(&s(3));
        assert_eq!(a, b);
        assert_eq!(a.accumulated, s(21));
    }

    #[test]
    fn lenet_scale_walk() {
        let w = Scale::power_of_two(16);
        let pool = s(4);
        let state = ScaleState::new(s(255))
            .compose(&w)
            .compose(&pool)
            .compose(&w)
            .compose(&pool)
            .compose(&w)
            .compose(&w);
        let expected = BigUint::from(16u32) << 64u32;
        assert_eq!(state.accumulated.factor(), &expected);
        assert_eq!(state.total().factor(), &(expected * 255u32));
    }

    #[test]
    fn bound_boundary() {
        let pk = toy_pk();
        assert!(matches!(
            check_bound(&BigUint::from(17u32), &pk),
            Err(FixedPointError::Overflow { .. })
        ));
        assert!(check_bound(&BigUint::from(16u32), &pk).is_ok());
        let v = encode_real_for_key(0.17, &s(100), &pk);
        assert!(v.is_err());
        assert!(encode_real_for_key(0.16, &s(100), &pk).is_ok());
    }

    #[test]
    fn scale_parsing() {
        assert_eq!("65536".parse::<Scale>().unwrap(), Scale::power_of_two(16));
        assert_eq!("0".parse::<Scale>(), Err(FixedPointError::ZeroScale));
        assert!("-4".parse::<Scale>().is_err());
        assert!("1e3".parse::<Scale>().is_err());
    }

    proptest! {
        #[test]
        fn rounding_error_at_most_half(x in -1.0e6f64..1.0e6, k in 0u32..40) {
            let factor = BigUint::one() << k;
            let raw = round_scaled(x, &factor).unwrap();
            let err = (raw.to_f64().unwrap() - x * 2f64.powi(k as i32)).abs();
            prop_assert!(err <= 0.5 + 1e-9 * x.abs() * 2f64.powi(k as i32));
        }

        #[test]
        fn exact_when_integral(n in -1_000_000i64..1_000_000, k in 0u32..20) {
            let factor = BigUint::one() << k;
            let x = n as f64 / 2f64.powi(k as i32);
            let v = encode_real(x, &Scale(factor)).unwrap();
            prop_assert_eq!(&v.raw, &BigInt::from(n));
            prop_assert_eq!(decode_real(&v), x);
        }

        #[test]
        fn bound_check_monotone(b in 0u64..10_000, d in 0u64..10_000) {
            let pk = PublicKey::from_modulus(BigUint::from(10_007u32)).unwrap();
            let big = BigUint::from(b);
            let smaller = BigUint::from(b.saturating_sub(d));
            if check_bound(&big, &pk).is_ok() {
                prop_assert!(check_bound(&smaller, &pk).is_ok());
            }
        }
    }
}
