use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_CODE_BITS: u8 = 4;

/// Exponent window of one layer. A term code spends one bit on the sign and
/// `code_bits - 1` bits selecting one of `2^(code_bits-1) - 1` exponents or
/// the zero code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExponentRange {
    pub e_max: i32,
    pub e_min: i32,
    pub code_bits: u8,
}

impl ExponentRange {
    pub fn new(e_max: i32, code_bits: u8) -> Result<Self> {
        if !(3..=8).contains(&code_bits) {
            return Err(Error::encoding(format!("code_bits must be in 3..=8, got {code_bits}")));
        }
        let count = (1i32 << (code_bits - 1)) - 1;
        Ok(ExponentRange { e_max, e_min: e_max - count + 1, code_bits })
    }

    /// Window whose top exponent is the log-rounded largest magnitude in `weights`.
    pub fn for_weights<T: Real>(weights: &[T], code_bits: u8) -> Result<Self> {
        let max = weights.iter().fold(0.0f64, |m, w| m.max(w.as_f64().abs()));
        let e_max = if max > 0.0 && max.is_finite() { log2_round(max) } else { 0 };
        Self::new(e_max, code_bits)
    }

    pub fn exponent_count(&self) -> i32 {
        self.e_max - self.e_min + 1
    }

    pub fn contains(&self, exponent: i32) -> bool {
        (self.e_min..=self.e_max).contains(&exponent)
    }
}

/// A signed power of two, or zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PowerOfTwoCode {
    negative: bool,
    exponent: i16,
    zero: bool,
}

impl PowerOfTwoCode {
    pub const ZERO: PowerOfTwoCode = PowerOfTwoCode { negative: false, exponent: 0, zero: true };

    pub fn new(sign: i8, exponent: i32) -> Self {
        PowerOfTwoCode { negative: sign < 0, exponent: exponent as i16, zero: false }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// −1 or +1 (zero codes report +1).
    pub fn sign(&self) -> i8 {
        if self.negative {
            -1
        } else {
            1
        }
    }

    pub fn exponent(&self) -> i32 {
        self.exponent as i32
    }

    pub fn decode<T: Real>(&self) -> T {
        if self.zero {
            T::zero()
        } else {
            let v = pow2(self.exponent as i32);
            T::lit(if self.negative { -v } else { v })
        }
    }

    /// Packs into `range.code_bits` bits: sign in the top bit, then
    /// `exponent - e_min + 1` (0 is the zero code).
    pub fn to_bits(&self, range: &ExponentRange) -> Result<u8> {
        if self.zero {
            return Ok(0);
        }
        if !range.contains(self.exponent()) {
            return Err(Error::encoding(format!(
                "exponent {} outside [{}, {}]",
                self.exponent, range.e_min, range.e_max
            )));
        }
        let magnitude = (self.exponent() - range.e_min + 1) as u8;
        Ok(((self.negative as u8) << (range.code_bits - 1)) | magnitude)
    }

    pub fn from_bits(bits: u8, range: &ExponentRange) -> Result<Self> {
        let mag_bits = range.code_bits - 1;
        if (bits as u16) >> range.code_bits != 0 {
            return Err(Error::encoding(format!("code {bits:#x} wider than {} bits", range.code_bits)));
        }
        let negative = bits >> mag_bits == 1;
        let magnitude = (bits & ((1 << mag_bits) - 1)) as i32;
        if magnitude == 0 {
            return if negative { Err(Error::encoding("negative zero code")) } else { Ok(Self::ZERO) };
        }
        Ok(PowerOfTwoCode { negative, exponent: (range.e_min + magnitude - 1) as i16, zero: false })
    }
}

/// Exact `2^e` for the exponents that occur here.
pub fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// `[log2 x]` for `x > 0`, rounding half up in the log domain. The rounding
/// boundary `m = √2` on the mantissa `m ∈ [1, 2)` is compared exactly.
pub fn log2_round(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let mut e = x.log2().floor() as i32;
    let mut m = x / pow2(e);
    // log2 may be off by one ulp near powers of two
    if m >= 2.0 {
        e += 1;
        m /= 2.0;
    } else if m < 1.0 {
        e -= 1;
        m *= 2.0;
    }
    // No double equals √2; SQRT_2 is the nearest one and lies above it.
    if m >= SQRT_2 {
        e + 1
    } else {
        e
    }
}

/// Rounds `x` to the nearest signed power of two in the log domain, clamped
/// to `range`. Zero and magnitudes below `2^(e_min-1)` give the zero code.
pub fn round_pow2(x: f64, range: &ExponentRange) -> PowerOfTwoCode {
    let a = x.abs();
    if a == 0.0 || a < pow2(range.e_min - 1) || !a.is_finite() {
        return PowerOfTwoCode::ZERO;
    }
    let e = log2_round(a).clamp(range.e_min, range.e_max);
    PowerOfTwoCode::new(if x < 0.0 { -1 } else { 1 }, e)
}
