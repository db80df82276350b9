//! Signed fixed-point integers shared by the codec, the plaintext network and
//! the protocol parties.
//!
//! A value `v` carried at `s` fraction bits stands for the real `v / 2^s`.

use thiserror::Error;

/// Largest supported number of fraction bits per scale unit.
pub const MAX_FRAC_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedError {
    #[error("value {value} is not finite")]
    NotFinite { value: f64 },
    #[error("value {value} does not fit at {bits} fraction bits")]
    OutOfRange { value: f64, bits: u32 },
    #[error("fixed-point arithmetic overflowed")]
    Overflow,
}

/// Round-half-away-from-zero encoding of `x` at `bits` fraction bits.
pub fn to_fixed(x: f64, bits: u32) -> Result<i128, FixedError> {
    if !x.is_finite() {
        return Err(FixedError::NotFinite { value: x });
    }
    let scaled = (x * (bits as f64).exp2()).round();
    if scaled.abs() >= 2f64.powi(126) {
        return Err(FixedError::OutOfRange { value: x, bits });
    }
    Ok(scaled as i128)
}

pub fn to_real(v: i128, bits: u32) -> f64 {
    v as f64 / (bits as f64).exp2()
}

/// Drops `k` fraction bits, rounding half up: `floor((v + 2^(k-1)) / 2^k)`.
///
/// Shifting `v` by a multiple of `2^k` shifts the result by exactly the
/// quotient, which is what lets blinded values be rescaled after unblinding.
pub fn rescale(v: i128, k: u32) -> Result<i128, FixedError> {
    if k == 0 {
        return Ok(v);
    }
    if k >= 127 {
        return Err(FixedError::Overflow);
    }
    let half = 1i128 << (k - 1);
    Ok(v.checked_add(half).ok_or(FixedError::Overflow)? >> k)
}

/// Exact sum of products, `Σ a_i·b_i`.
pub fn dot_exact(pairs: impl IntoIterator<Item = (i128, i128)>) -> Result<i128, FixedError> {
    let mut acc: i128 = 0;
    for (a, b) in pairs {
        let p = a.checked_mul(b).ok_or(FixedError::Overflow)?;
        acc = acc.checked_add(p).ok_or(FixedError::Overflow)?;
    }
    Ok(acc)
}

pub fn add(a: i128, b: i128) -> Result<i128, FixedError> {
    a.checked_add(b).ok_or(FixedError::Overflow)
}

pub fn sub(a: i128, b: i128) -> Result<i128, FixedError> {
    a.checked_sub(b).ok_or(FixedError::Overflow)
}

/// Number of bits needed for `|v|`.
pub fn bit_len(v: i128) -> u32 {
    128 - v.unsigned_abs().leading_zeros()
}
