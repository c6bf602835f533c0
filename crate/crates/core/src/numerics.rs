//! Fixed-point encoding of real-valued keystroke statistics.
//!
//! Reals are carried as signed integers `round(x * 2^f)`, rounded half away
//! from zero. Every value that enters a secure comparison must fit the signed
//! range `(-2^(l-1), 2^(l-1))`; at the comparison boundary it is shifted into
//! `[0, 2^l)` by [`to_offset_domain`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported comparison bit-length; raw values are held in `i64`.
pub const MAX_VALUE_BITS: u32 = 62;
/// Smallest accepted statistical blinding parameter.
pub const MIN_STAT_SEC: u32 = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumericsError {
    #[error("value out of fixed-point range: {0}")]
    RangeOverflow(String),
    #[error("invalid fixed-point parameters: {0}")]
    InvalidParams(String),
}

/// Scaling and range contract binding plaintext reals to protocol integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointParams {
    /// `f`: fractional bits, scale `S = 2^f`.
    pub frac_bits: u32,
    /// `l`: bit-length of compared values.
    pub value_bits: u32,
    /// `κ`: statistical blinding bits used by the comparison protocol.
    pub stat_sec: u32,
}

impl Default for FixedPointParams {
    fn default() -> Self {
        Self {
            frac_bits: 16,
            value_bits: 40,
            stat_sec: 40,
        }
    }
}

impl FixedPointParams {
    pub fn new(frac_bits: u32, value_bits: u32, stat_sec: u32) -> Result<Self, NumericsError> {
        let params = Self {
            frac_bits,
            value_bits,
            stat_sec,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.frac_bits < 1 {
            return Err(NumericsError::InvalidParams("frac_bits must be >= 1".into()));
        }
        if self.value_bits <= self.frac_bits {
            return Err(NumericsError::InvalidParams(format!(
                "value_bits ({}) must exceed frac_bits ({})",
                self.value_bits, self.frac_bits
            )));
        }
        if self.value_bits > MAX_VALUE_BITS {
            return Err(NumericsError::InvalidParams(format!(
                "value_bits must be <= {MAX_VALUE_BITS}"
            )));
        }
        if self.stat_sec < MIN_STAT_SEC {
            return Err(NumericsError::InvalidParams(format!(
                "stat_sec must be >= {MIN_STAT_SEC}"
            )));
        }
        Ok(())
    }

    /// Checks `l + κ + 2 < plaintext_bits`.
    pub fn fits_plaintext_space(&self, plaintext_bits: u64) -> bool {
        u64::from(self.value_bits + self.stat_sec + 2) < plaintext_bits
    }

    pub fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Exclusive bound on `|raw|`: `2^(l-1)`.
    pub fn magnitude_bound(&self) -> i64 {
        1i64 << (self.value_bits - 1)
    }

    pub fn in_range(&self, raw: i64) -> bool {
        raw.unsigned_abs() < self.magnitude_bound() as u64
    }
}

/// A real `x` represented as `round(x * 2^f)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedValue(i64);

impl FixedValue {
    pub const ZERO: FixedValue = FixedValue(0);

    pub fn from_raw(raw: i64, params: &FixedPointParams) -> Result<Self, NumericsError> {
        if params.in_range(raw) {
            Ok(Self(raw))
        } else {
            Err(NumericsError::RangeOverflow(format!(
                "|{raw}| >= 2^{}",
                params.value_bits - 1
            )))
        }
    }

    pub fn raw(self) -> i64 {
        self.0
    }

    /// `k * self` on raw integers; this is the quantized product the encrypted
    /// pipeline computes as `E(v)^k`.
    pub fn scaled_by(self, k: i64, params: &FixedPointParams) -> Result<Self, NumericsError> {
        let raw = self
            .0
            .checked_mul(k)
            .ok_or_else(|| NumericsError::RangeOverflow(format!("{} * {k}", self.0)))?;
        Self::from_raw(raw, params)
    }

    pub fn checked_add(self, other: Self, params: &FixedPointParams) -> Result<Self, NumericsError> {
        let raw = self
            .0
            .checked_add(other.0)
            .ok_or_else(|| NumericsError::RangeOverflow(format!("{} + {}", self.0, other.0)))?;
        Self::from_raw(raw, params)
    }

    pub fn checked_sub(self, other: Self, params: &FixedPointParams) -> Result<Self, NumericsError> {
        let raw = self
            .0
            .checked_sub(other.0)
            .ok_or_else(|| NumericsError::RangeOverflow(format!("{} - {}", self.0, other.0)))?;
        Self::from_raw(raw, params)
    }

    pub fn abs_diff(self, other: Self, params: &FixedPointParams) -> Result<Self, NumericsError> {
        let d = self.checked_sub(other, params)?;
        Self::from_raw(d.0.abs(), params)
    }
}

/// `round(x * 2^f)`, ties away from zero.
pub fn encode(x: f64, params: &FixedPointParams) -> Result<FixedValue, NumericsError> {
    if !x.is_finite() {
        return Err(NumericsError::RangeOverflow(format!("{x} is not finite")));
    }
    // Multiplying by a power of two is exact, so only the rounding step loses
    // precision. f64::round rounds half away from zero.
    let rounded = (x * params.scale()).round();
    if rounded.abs() >= params.magnitude_bound() as f64 {
        return Err(NumericsError::RangeOverflow(format!(
            "{x} * 2^{} does not fit in {} signed bits",
            params.frac_bits, params.value_bits
        )));
    }
    Ok(FixedValue(rounded as i64))
}

pub fn decode(value: FixedValue, params: &FixedPointParams) -> f64 {
    value.0 as f64 / params.scale()
}

/// Order-preserving shift `raw + 2^(l-1)` into `[0, 2^l)`.
pub fn to_offset_domain(value: FixedValue, params: &FixedPointParams) -> Result<u64, NumericsError> {
    if !params.in_range(value.0) {
        return Err(NumericsError::RangeOverflow(format!(
            "{} outside signed {}-bit range",
            value.0, params.value_bits
        )));
    }
    Ok((value.0 + params.magnitude_bound()) as u64)
}
