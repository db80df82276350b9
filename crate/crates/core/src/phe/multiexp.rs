//! Windowed simultaneous exponentiation over `Z_{n^2}` with signed exponents.
//!
//! Each base gets a table of its first `2^W - 1` powers (and of its inverse's
//! powers when a negative exponent will be applied to it). A product
//! `Π b_i^{e_i}` then shares one squaring chain across all terms.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Zero};

const WINDOW: u64 = 4;
const DIGITS: usize = (1 << WINDOW) - 1;

#[derive(Debug, Clone)]
pub struct PowTable {
    pos: Vec<BigUint>,
    neg: Option<Vec<BigUint>>,
}

fn powers(base: &BigUint, modulus: &BigUint) -> Vec<BigUint> {
    let mut out = Vec::with_capacity(DIGITS);
    out.push(base.clone());
    for i in 1..DIGITS {
        let next = &out[i - 1] * base % modulus;
        out.push(next);
    }
    out
}

/// Inverts every element with a single modular inversion.
///
/// Returns `None` if any element is not invertible.
pub fn batch_invert(values: &[&BigUint], modulus: &BigUint) -> Option<Vec<BigUint>> {
    if values.is_empty() {
        return Some(Vec::new());
    }
    let mut prefix = Vec::with_capacity(values.len());
    let mut acc = BigUint::one();
    for v in values {
        acc = acc * *v % modulus;
        prefix.push(acc.clone());
    }
    let mut inv = acc.modinv(modulus)?;
    let mut out = vec![BigUint::zero(); values.len()];
    for i in (0..values.len()).rev() {
        if i == 0 {
            out[0] = inv.clone();
        } else {
            out[i] = &inv * &prefix[i - 1] % modulus;
            inv = inv * values[i] % modulus;
        }
    }
    Some(out)
}

/// Builds tables for `bases`; `needs_neg[i]` requests inverse powers for base `i`.
pub fn build_tables(bases: &[&BigUint], needs_neg: &[bool], modulus: &BigUint) -> Option<Vec<PowTable>> {
    debug_assert_eq!(bases.len(), needs_neg.len());
    let to_invert: Vec<&BigUint> = bases.iter().zip(needs_neg).filter(|(_, &n)| n).map(|(b, _)| *b).collect();
    let mut inverses = batch_invert(&to_invert, modulus)?.into_iter();
    let tables = bases
        .iter()
        .zip(needs_neg)
        .map(|(b, &neg)| {
            let inv = if neg { inverses.next() } else { None };
            PowTable::from_parts(b, inv.as_ref(), modulus)
        })
        .collect();
    Some(tables)
}

impl PowTable {
    pub fn build(base: &BigUint, with_inverse: bool, modulus: &BigUint) -> Option<Self> {
        build_tables(&[base], &[with_inverse], modulus).map(|mut v| v.remove(0))
    }

    /// Table for `base`, with inverse powers when `inverse` is given.
    pub fn from_parts(base: &BigUint, inverse: Option<&BigUint>, modulus: &BigUint) -> Self {
        PowTable { pos: powers(base, modulus), neg: inverse.map(|i| powers(i, modulus)) }
    }

    fn digit(&self, negative: bool, d: usize) -> &BigUint {
        if negative {
            &self.neg.as_ref().expect("inverse table required for negative exponent")[d - 1]
        } else {
            &self.pos[d - 1]
        }
    }
}

fn window_digit(mag: &BigUint, window: u64) -> usize {
    let mut d = 0usize;
    for b in (0..WINDOW).rev() {
        d = (d << 1) | mag.bit(window * WINDOW + b) as usize;
    }
    d
}

/// Computes `Π table_i.base^{e_i} mod modulus`.
///
/// Panics if a negative exponent is paired with a table built without inverse.
pub fn multi_exp(terms: &[(&PowTable, &BigInt)], modulus: &BigUint) -> BigUint {
    let parts: Vec<(&PowTable, bool, &BigUint)> = terms
        .iter()
        .filter(|(_, e)| !e.is_zero())
        .map(|(t, e)| (*t, e.sign() == Sign::Minus, e.magnitude()))
        .collect();
    let max_bits = parts.iter().map(|(_, _, m)| m.bits()).max().unwrap_or(0);
    let windows = max_bits.div_ceil(WINDOW);
    let mut acc = BigUint::one();
    let mut started = false;
    for w in (0..windows).rev() {
        if started {
            for _ in 0..WINDOW {
                acc = &acc * &acc % modulus;
            }
        }
        for (table, negative, mag) in &parts {
            let d = window_digit(mag, w);
            if d != 0 {
                acc = if started { &acc * table.digit(*negative, d) % modulus } else { table.digit(*negative, d).clone() };
                started = true;
            }
        }
    }
    acc % modulus
}
