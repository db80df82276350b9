//! Element arithmetic for the plaintext network: real (`f64`) or fixed-point
//! integers whose scale is a whole number of `f`-bit units.

use std::fmt::Debug;

use crate::fixed;

use super::NnError;

pub trait Arith: Clone + Debug + Send + Sync {
    type Elem: Copy + Debug + PartialEq + Send + Sync + 'static;

    fn zero(&self) -> Self::Elem;

    /// Encodes `x` at `units` scale units (a unit is `f` fraction bits).
    fn from_real(&self, x: f64, units: u32) -> Result<Self::Elem, NnError>;

    fn to_real(&self, v: Self::Elem, units: u32) -> f64;

    /// `Σ a·b` for operands whose scales sum to `in_units`, returned at
    /// `out_units` (fixed mode rescales with round-half-up).
    fn dot(&self, pairs: impl Iterator<Item = (Self::Elem, Self::Elem)>, in_units: u32, out_units: u32) -> Result<Self::Elem, NnError>;

    fn add(&self, a: Self::Elem, b: Self::Elem) -> Result<Self::Elem, NnError>;

    fn sub(&self, a: Self::Elem, b: Self::Elem) -> Result<Self::Elem, NnError>;

    fn is_positive(&self, v: Self::Elem) -> bool;

    /// `a·b` rescaled from `in_units` to `out_units`.
    fn mul(&self, a: Self::Elem, b: Self::Elem, in_units: u32, out_units: u32) -> Result<Self::Elem, NnError> {
        self.dot(std::iter::once((a, b)), in_units, out_units)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Float;

/// Fixed-point arithmetic with `frac_bits` per scale unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    frac_bits: u32,
}

impl Fixed {
    pub fn new(frac_bits: u32) -> Result<Self, NnError> {
        if frac_bits == 0 || frac_bits > fixed::MAX_FRAC_BITS {
            return Err(NnError::Config(format!("fraction bits must be in 1..={}, got {frac_bits}", fixed::MAX_FRAC_BITS)));
        }
        Ok(Self { frac_bits })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }
}

impl Arith for Float {
    type Elem = f64;

    fn zero(&self) -> f64 {
        0.0
    }

    fn from_real(&self, x: f64, _units: u32) -> Result<f64, NnError> {
        if x.is_finite() {
            Ok(x)
        } else {
            Err(NnError::NonFinite)
        }
    }

    fn to_real(&self, v: f64, _units: u32) -> f64 {
        v
    }

    fn dot(&self, pairs: impl Iterator<Item = (f64, f64)>, _in: u32, _out: u32) -> Result<f64, NnError> {
        Ok(pairs.map(|(a, b)| a * b).sum())
    }

    fn add(&self, a: f64, b: f64) -> Result<f64, NnError> {
        Ok(a + b)
    }

    fn sub(&self, a: f64, b: f64) -> Result<f64, NnError> {
        Ok(a - b)
    }

    fn is_positive(&self, v: f64) -> bool {
        v > 0.0
    }
}

impl Arith for Fixed {
    type Elem = i128;

    fn zero(&self) -> i128 {
        0
    }

    fn from_real(&self, x: f64, units: u32) -> Result<i128, NnError> {
        Ok(fixed::to_fixed(x, units * self.frac_bits)?)
    }

    fn to_real(&self, v: i128, units: u32) -> f64 {
        fixed::to_real(v, units * self.frac_bits)
    }

    fn dot(&self, pairs: impl Iterator<Item = (i128, i128)>, in_units: u32, out_units: u32) -> Result<i128, NnError> {
        let exact = fixed::dot_exact(pairs)?;
        if in_units < out_units {
            return Err(NnError::Config(format!("cannot raise scale from {in_units} to {out_units} units")));
        }
        Ok(fixed::rescale(exact, (in_units - out_units) * self.frac_bits)?)
    }

    fn add(&self, a: i128, b: i128) -> Result<i128, NnError> {
        Ok(fixed::add(a, b)?)
    }

    fn sub(&self, a: i128, b: i128) -> Result<i128, NnError> {
        Ok(fixed::sub(a, b)?)
    }

    fn is_positive(&self, v: i128) -> bool {
        v > 0
    }
}
