//! Fixed-point encoding of signed reals into the Paillier plaintext space and
//! homomorphic tensor operations on encrypted fixed-point data.
//!
//! A real `x` at `s` fraction bits becomes the integer `round(x·2^s)`; negative
//! integers `v` are stored as `n + v`, so residues above `n/2` decode negative.

mod counter;
mod ops;
mod tensor;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::ToPrimitive;
use thiserror::Error;

use crate::fixed::{self, FixedError};
use crate::phe::{PheError, PublicKey};
use crate::wire::WireError;

pub use counter::{OpCounter, OpCounts};
pub use ops::Evaluator;
pub use tensor::{CipherTensor, PlainTensor};

/// Default magnitude budget of freshly encrypted operands: `|x| < 2^20`.
pub const DEFAULT_OPERAND_BITS: u32 = 20;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("value {value} overflows the representable range at {frac_bits} fraction bits")]
    Overflow { value: f64, frac_bits: u32 },
    #[error("value {0} is not finite")]
    NotFinite(f64),
    #[error("homomorphic result may exceed n/2 ({needed_bits} bits needed, {available_bits} available)")]
    ResultOverflow { needed_bits: u64, available_bits: u64 },
    #[error("operand magnitude exceeds the declared bound of 2^{bound_bits}")]
    OperandBound { bound_bits: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scale mismatch: {left} vs {right} fraction bits")]
    Scale { left: u32, right: u32 },
    #[error("fraction bits must be in 1..={max}, got {got}")]
    FracBits { got: u32, max: u32 },
    #[error("decrypted value does not fit the fixed-point range")]
    DecodedRange,
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Crypto(#[from] PheError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Fixed-point parameters bound to a Paillier modulus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedScale {
    frac_bits: u32,
    operand_bits: u32,
    n: BigUint,
    half_n: BigUint,
}

impl FixedScale {
    pub fn new(frac_bits: u32, n: &BigUint) -> Result<Self, CodecError> {
        if frac_bits == 0 || frac_bits > fixed::MAX_FRAC_BITS {
            return Err(CodecError::FracBits { got: frac_bits, max: fixed::MAX_FRAC_BITS });
        }
        Ok(Self { frac_bits, operand_bits: DEFAULT_OPERAND_BITS, n: n.clone(), half_n: n >> 1u32 })
    }

    pub fn for_key(frac_bits: u32, pk: &PublicKey) -> Result<Self, CodecError> {
        Self::new(frac_bits, pk.n())
    }

    pub fn with_operand_bits(mut self, bits: u32) -> Self {
        self.operand_bits = bits;
        self
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Declared bound on the integer part of fresh operands.
    pub fn operand_bits(&self) -> u32 {
        self.operand_bits
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// `B = n / 2^(f+1)`: reals with `|x| ≥ B` are not encodable.
    pub fn bound(&self) -> BigUint {
        &self.n >> (self.frac_bits + 1)
    }

    /// Bits available for magnitudes: results must stay below `n/2`.
    pub fn capacity_bits(&self) -> u64 {
        self.n.bits().saturating_sub(2)
    }

    /// Encodes at the base scale `f`.
    pub fn encode(&self, x: f64) -> Result<BigUint, CodecError> {
        self.encode_at(x, self.frac_bits)
    }

    pub fn encode_at(&self, x: f64, bits: u32) -> Result<BigUint, CodecError> {
        if !x.is_finite() {
            return Err(CodecError::NotFinite(x));
        }
        let v = fixed::to_fixed(x, bits).map_err(|_| CodecError::Overflow { value: x, frac_bits: bits })?;
        self.encode_int(v).map_err(|_| CodecError::Overflow { value: x, frac_bits: bits })
    }

    /// Maps a signed integer into `Z_n`.
    pub fn encode_int(&self, v: i128) -> Result<BigUint, CodecError> {
        let mag = BigUint::from(v.unsigned_abs());
        if mag > self.half_n {
            return Err(CodecError::ResultOverflow { needed_bits: mag.bits(), available_bits: self.capacity_bits() });
        }
        Ok(if v < 0 { &self.n - mag } else { mag })
    }

    /// Maps a residue to its signed representative in `(-n/2, n/2]`.
    pub fn signed(&self, v: &BigUint) -> BigInt {
        if v > &self.half_n {
            -BigInt::from(&self.n - v)
        } else {
            BigInt::from(v.clone())
        }
    }

    pub fn decode_int(&self, v: &BigUint) -> Result<i128, CodecError> {
        self.signed(v).to_i128().ok_or(CodecError::DecodedRange)
    }

    /// Decodes a residue carrying the base scale `f`.
    pub fn decode(&self, v: &BigUint) -> f64 {
        self.decode_at(v, self.frac_bits)
    }

    pub fn decode_at(&self, v: &BigUint, bits: u32) -> f64 {
        let s = self.signed(v);
        let mag = s.magnitude().to_f64().unwrap_or(f64::INFINITY);
        let x = mag / (bits as f64).exp2();
        if s.sign() == Sign::Minus {
            -x
        } else {
            x
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scale(f: u32) -> FixedScale {
        FixedScale::new(f, &BigUint::from(143u32)).unwrap()
    }

    #[test]
    fn toy_modulus_examples() {
        let fs = scale(2);
        assert_eq!(fs.encode(1.5).unwrap(), BigUint::from(6u32));
        assert_eq!(fs.encode(-1.5).unwrap(), BigUint::from(137u32));
        assert_eq!(fs.decode(&BigUint::from(137u32)), -1.5);
        assert_eq!(fs.decode(&BigUint::from(71u32)), 17.75);
        assert_eq!(fs.decode(&BigUint::from(72u32)), -17.75);
        assert_eq!(fs.bound(), BigUint::from(17u32));
    }

    #[test]
    fn overflow_detected() {
        let fs = scale(2);
        assert!(fs.encode(17.75).is_ok());
        assert!(matches!(fs.encode(18.0), Err(CodecError::Overflow { .. })));
        assert!(matches!(fs.encode(f64::NAN), Err(CodecError::NotFinite(_))));
        assert!(FixedScale::new(0, &BigUint::from(143u32)).is_err());
        assert!(FixedScale::new(33, &BigUint::from(143u32)).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let fs = scale(1);
        assert_eq!(fs.encode(0.25).unwrap(), BigUint::from(1u32));
        assert_eq!(fs.encode(-0.25).unwrap(), BigUint::from(142u32));
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_ulp(x in -1.0e6f64..1.0e6, f in 1u32..=32) {
            let n = (BigUint::from(1u32) << 200u32) + 235u32;
            let fs = FixedScale::new(f, &n).unwrap();
            let back = fs.decode(&fs.encode(x).unwrap());
            prop_assert!((back - x).abs() <= 0.5 / (f as f64).exp2() + x.abs() * 1e-15);
        }

        #[test]
        fn encode_decode_int_inverse(v in any::<i64>()) {
            let n = (BigUint::from(1u32) << 200u32) + 235u32;
            let fs = FixedScale::new(16, &n).unwrap();
            prop_assert_eq!(fs.decode_int(&fs.encode_int(v as i128).unwrap()).unwrap(), v as i128);
        }
    }
}
