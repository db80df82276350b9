use num_bigint::BigUint;

use super::CodecError;
use crate::fixed;
use crate::phe::{Ciphertext, PublicKey};
use crate::wire::{Reader, Writer};

/// Row-major tensor of signed fixed-point integers at `scale` fraction bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainTensor {
    dims: Vec<usize>,
    scale: u32,
    data: Vec<i128>,
}

/// Row-major tensor of ciphertexts encrypting fixed-point values.
///
/// `bound_bits` is a public upper bound on the bit length of every encrypted
/// magnitude, used to reject operations that could wrap modulo `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherTensor {
    pub(crate) dims: Vec<usize>,
    pub(crate) scale: u32,
    pub(crate) data: Vec<Ciphertext>,
    pub(crate) bound_bits: u32,
}

fn check_len(dims: &[usize], len: usize) -> Result<(), CodecError> {
    let want: usize = dims.iter().product();
    if want != len {
        return Err(CodecError::Shape(format!("dims {dims:?} need {want} elements, got {len}")));
    }
    Ok(())
}

impl PlainTensor {
    pub fn new(dims: Vec<usize>, scale: u32, data: Vec<i128>) -> Result<Self, CodecError> {
        check_len(&dims, data.len())?;
        Ok(Self { dims, scale, data })
    }

    pub fn zeros(dims: Vec<usize>, scale: u32) -> Self {
        let len = dims.iter().product();
        Self { dims, scale, data: vec![0; len] }
    }

    /// Encodes reals at `scale` fraction bits.
    pub fn encode(dims: Vec<usize>, scale: u32, values: &[f64]) -> Result<Self, CodecError> {
        let data = values
            .iter()
            .map(|&x| fixed::to_fixed(x, scale).map_err(|_| CodecError::Overflow { value: x, frac_bits: scale }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dims, scale, data)
    }

    pub fn vector(scale: u32, data: Vec<i128>) -> Self {
        Self { dims: vec![data.len()], scale, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn data(&self) -> &[i128] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i128] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i128> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.data.iter().map(|&v| fixed::to_real(v, self.scale)).collect()
    }

    pub fn max_abs_bits(&self) -> u32 {
        self.data.iter().map(|&v| fixed::bit_len(v)).max().unwrap_or(0)
    }

    pub fn write(&self, w: &mut Writer) {
        write_header(w, &self.dims, self.scale);
        for &v in &self.data {
            w.i128(v);
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let (dims, scale) = read_header(r, 16)?;
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| r.i128()).collect::<Result<Vec<_>, _>>()?;
        Self::new(dims, scale, data)
    }
}

fn write_header(w: &mut Writer, dims: &[usize], scale: u32) {
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u32(d as u32);
    }
    w.i16(scale as i16);
}

fn read_header(r: &mut Reader<'_>, elem_min: usize) -> Result<(Vec<usize>, u32), CodecError> {
    let rank = r.count(4)?;
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let scale = r.i16()?;
    if scale < 0 {
        return Err(CodecError::Shape(format!("negative scale {scale}")));
    }
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match len {
        Some(len) if len.saturating_mul(elem_min) <= r.remaining() => Ok((dims, scale as u32)),
        _ => Err(CodecError::Shape(format!("dims {dims:?} exceed the message size"))),
    }
}

impl CipherTensor {
    pub fn new(dims: Vec<usize>, scale: u32, data: Vec<Ciphertext>, bound_bits: u32) -> Result<Self, CodecError> {
        check_len(&dims, data.len())?;
        Ok(Self { dims, scale, data, bound_bits })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn data(&self) -> &[Ciphertext] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bound_bits(&self) -> u32 {
        self.bound_bits
    }

    /// Replaces the public magnitude bound, e.g. after receiving the tensor.
    pub fn with_bound_bits(mut self, bits: u32) -> Self {
        self.bound_bits = bits;
        self
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self, CodecError> {
        check_len(&dims, self.data.len())?;
        self.dims = dims;
        Ok(self)
    }

    /// Wire form: rank, dims, signed 2-byte scale, then each ciphertext as a
    /// length-prefixed big-endian integer.
    pub fn write(&self, w: &mut Writer) {
        write_header(w, &self.dims, self.scale);
        for c in &self.data {
            w.biguint(c.raw());
        }
    }

    /// Reads a tensor and checks every element lies in `Z*_{n^2}` for `pk`.
    /// The magnitude bound is set to `bound_bits`.
    pub fn read(r: &mut Reader<'_>, pk: &PublicKey, bound_bits: u32) -> Result<Self, CodecError> {
        let (dims, scale) = read_header(r, 4)?;
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let c = Ciphertext::from_raw(r.biguint()?);
            pk.validate(&c)?;
            data.push(c);
        }
        Self::new(dims, scale, data, bound_bits)
    }

    pub fn raw_values(&self) -> impl Iterator<Item = &BigUint> {
        self.data.iter().map(|c| c.raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phe::keypair_from_primes;

    #[test]
    fn plain_wire_roundtrip() {
        let t = PlainTensor::new(vec![2, 2], 8, vec![1, -2, 3, i128::MIN + 1]).unwrap();
        let mut w = Writer::new();
        t.write(&mut w);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(PlainTensor::read(&mut r).unwrap(), t);
        r.finish().unwrap();
    }

    #[test]
    fn cipher_wire_layout_and_validation() {
        let (pk, _) = keypair_from_primes(&BigUint::from(11u32), &BigUint::from(13u32)).unwrap();
        let t = CipherTensor::new(vec![2], 4, vec![Ciphertext::from_raw(BigUint::from(2u32)), Ciphertext::from_raw(BigUint::from(300u32))], 3).unwrap();
        let mut w = Writer::new();
        t.write(&mut w);
        let bytes = w.into_bytes();
        assert_eq!(bytes, vec![0, 0, 0, 1, 0, 0, 0, 2, 0, 4, 0, 0, 0, 1, 2, 0, 0, 0, 2, 1, 44]);
        let back = CipherTensor::read(&mut Reader::new(&bytes), &pk, 3).unwrap();
        assert_eq!(back, t);
        let mut bad = bytes.clone();
        bad[14] = 13; // 13 shares a factor with n
        assert!(CipherTensor::read(&mut Reader::new(&bad), &pk, 3).is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(PlainTensor::new(vec![2, 3], 0, vec![0; 5]).is_err());
        let mut w = Writer::new();
        w.u32(1).u32(1 << 30).i16(0);
        assert!(PlainTensor::read(&mut Reader::new(&w.into_bytes())).is_err());
    }
}
