//! Fixed-point arithmetic with EVM-style truncating semantics.
//!
//! Values are stored as `i128` raws at a decimal [`Scale`]. Products are
//! formed in a 256-bit signed intermediate and divided back down with
//! truncation toward zero, the same rounding as the EVM `SDIV` opcode.
//! Overflow is always reported as an error, never wrapped.

use std::fmt;

use ethnum::I256;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported decimal exponent for a [`Scale`].
pub const MAX_SCALE_EXPONENT: u8 = 18;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FixedError {
    #[error("fixed-point overflow")]
    Overflow,
    #[error("division by zero")]
    DivisionByZero,
    #[error("scale exponent {0} outside [1, 18]")]
    ScaleOutOfRange(u32),
    #[error("operands carry different scales (10^{0} vs 10^{1})")]
    ScaleMismatch(u8, u8),
    #[error("non-finite value cannot be converted to fixed point")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, FixedError>;

/// A decimal scale `S = 10^exponent` with `exponent` in `[1, 18]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Scale {
    exponent: u8,
}

impl Scale {
    pub fn new(exponent: u32) -> Result<Self> {
        if (1..=MAX_SCALE_EXPONENT as u32).contains(&exponent) {
            Ok(Self { exponent: exponent as u8 })
        } else {
            Err(FixedError::ScaleOutOfRange(exponent))
        }
    }

    pub fn exponent(self) -> u8 {
        self.exponent
    }

    /// The multiplier `S`.
    pub fn value(self) -> i128 {
        10i128.pow(self.exponent as u32)
    }

    /// `1 / S` as a float.
    pub fn resolution(self) -> f64 {
        10f64.powi(-(self.exponent as i32))
    }

    /// Every supported scale, smallest first.
    pub fn all() -> impl Iterator<Item = Scale> {
        (1..=MAX_SCALE_EXPONENT).map(|exponent| Scale { exponent })
    }
}

impl TryFrom<u8> for Scale {
    type Error = FixedError;

    fn try_from(exponent: u8) -> Result<Self> {
        Scale::new(exponent as u32)
    }
}

impl From<Scale> for u8 {
    fn from(s: Scale) -> u8 {
        s.exponent
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "10^{}", self.exponent)
    }
}

/// A raw integer interpreted at a given scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaledInt {
    pub raw: i128,
    pub scale: Scale,
}

impl ScaledInt {
    pub fn new(raw: i128, scale: Scale) -> Result<Self> {
        if raw == i128::MIN {
            return Err(FixedError::Overflow);
        }
        Ok(Self { raw, scale })
    }

    pub fn to_f64(self) -> f64 {
        from_fixed(self)
    }

    pub fn checked_add(self, other: ScaledInt) -> Result<ScaledInt> {
        self.same_scale(other)?;
        let raw = self.raw.checked_add(other.raw).ok_or(FixedError::Overflow)?;
        ScaledInt::new(raw, self.scale)
    }

    pub fn checked_sub(self, other: ScaledInt) -> Result<ScaledInt> {
        self.same_scale(other)?;
        let raw = self.raw.checked_sub(other.raw).ok_or(FixedError::Overflow)?;
        ScaledInt::new(raw, self.scale)
    }

    /// Fixed-point product `idiv(a * b, S)`.
    pub fn checked_mul(self, other: ScaledInt) -> Result<ScaledInt> {
        self.same_scale(other)?;
        let raw = mac(0, self.raw, other.raw, self.scale)?;
        ScaledInt::new(raw, self.scale)
    }

    fn same_scale(self, other: ScaledInt) -> Result<()> {
        if self.scale == other.scale {
            Ok(())
        } else {
            Err(FixedError::ScaleMismatch(self.scale.exponent, other.scale.exponent))
        }
    }
}

impl fmt::Display for ScaledInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&decimal_string(self.raw, self.scale.exponent))
    }
}

/// Converts `v` to a raw at scale `s`, truncating toward zero.
///
/// The product is taken on the shortest decimal representation that
/// round-trips to `v` (the value a human would write), and computed with
/// exact integer arithmetic, so `0.15` at `S = 100` is exactly `15`.
pub fn to_fixed(v: f64, s: Scale) -> Result<ScaledInt> {
    if !v.is_finite() {
        return Err(FixedError::NonFinite);
    }
    let repr = format!("{v:e}");
    let (mantissa, exp) = repr.split_once('e').expect("`{:e}` always has an exponent");
    let exp: i32 = exp.parse().expect("`{:e}` exponent is an integer");
    let negative = mantissa.starts_with('-');
    let mantissa = mantissa.trim_start_matches('-');
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: u128 = format!("{int_part}{frac_part}").parse().expect("mantissa digits fit in u128");
    // value = digits * 10^(exp - frac_len); scaled by 10^exponent
    let shift = exp - frac_part.len() as i32 + s.exponent as i32;
    let magnitude = if shift >= 0 {
        10u128
            .checked_pow(shift as u32)
            .and_then(|p| digits.checked_mul(p))
            .ok_or(FixedError::Overflow)?
    } else {
        match 10u128.checked_pow((-shift) as u32) {
            Some(p) => digits / p,
            None => 0,
        }
    };
    if magnitude > i128::MAX as u128 {
        return Err(FixedError::Overflow);
    }
    let raw = if negative { -(magnitude as i128) } else { magnitude as i128 };
    Ok(ScaledInt { raw, scale: s })
}

/// The nearest `f64` to `raw / S`.
pub fn from_fixed(x: ScaledInt) -> f64 {
    decimal_string(x.raw, x.scale.exponent)
        .parse()
        .expect("decimal string always parses")
}

fn decimal_string(raw: i128, exponent: u8) -> String {
    let digits = raw.unsigned_abs().to_string();
    let width = exponent as usize + 1;
    let padded = format!("{digits:0>width$}");
    let (int_part, frac_part) = padded.split_at(padded.len() - exponent as usize);
    let sign = if raw < 0 { "-" } else { "" };
    format!("{sign}{int_part}.{frac_part}")
}

/// Signed division truncating toward zero (EVM `SDIV`).
pub fn idiv(a: i128, b: i128) -> Result<i128> {
    if b == 0 {
        return Err(FixedError::DivisionByZero);
    }
    a.checked_div(b).ok_or(FixedError::Overflow)
}

/// `acc + idiv(w * x, S)` with a 256-bit intermediate product.
pub fn mac(acc: i128, w: i128, x: i128, s: Scale) -> Result<i128> {
    let term = mul_div(w, x, s.value())?;
    acc.checked_add(term).ok_or(FixedError::Overflow)
}

/// `idiv(a * b, c)` with the product held in 256 bits.
pub fn mul_div(a: i128, b: i128, c: i128) -> Result<i128> {
    if c == 0 {
        return Err(FixedError::DivisionByZero);
    }
    let product = I256::from(a).checked_mul(I256::from(b)).ok_or(FixedError::Overflow)?;
    let q = product.checked_div(I256::from(c)).ok_or(FixedError::Overflow)?;
    i128::try_from(q).ok().filter(|q| *q != i128::MIN).ok_or(FixedError::Overflow)
}
