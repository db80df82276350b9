//! Big-endian byte encoding helpers shared by key files, tensors and frames.

use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after message body")]
    Trailing(usize),
    #[error("malformed field: {0}")]
    Malformed(String),
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i16(&mut self, v: i16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i128(&mut self, v: i128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// 4-byte length followed by the bytes.
    pub fn blob(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.bytes(v)
    }

    /// 4-byte length followed by the big-endian magnitude (no leading zeros).
    pub fn biguint(&mut self, v: &BigUint) -> &mut Self {
        if v.bits() == 0 {
            return self.u32(0);
        }
        self.blob(&v.to_bytes_be())
    }

    pub fn string(&mut self, s: &str) -> &mut Self {
        self.blob(s.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated { needed: n, available: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn i16(&mut self) -> Result<i16, WireError> {
        Ok(i16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn i128(&mut self) -> Result<i128, WireError> {
        Ok(i128::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn biguint(&mut self) -> Result<BigUint, WireError> {
        Ok(BigUint::from_bytes_be(self.blob()?))
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        let raw = self.blob()?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("string is not utf-8".into()))
    }

    /// Reads a count that will drive an allocation of `elem_min` bytes per
    /// element, rejecting counts the remaining input cannot possibly hold.
    pub fn count(&mut self, elem_min: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_min.max(1)) > self.remaining() && elem_min > 0 {
            return Err(WireError::Truncated { needed: n * elem_min, available: self.remaining() });
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_scalars() {
        let mut w = Writer::new();
        w.u8(7).u16(513).i16(-3).u32(70000).u64(1 << 40).f64(-0.5).string("hi");
        w.biguint(&BigUint::from(0x0102u32)).biguint(&BigUint::from(0u32)).i128(-5);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u16().unwrap(), 513);
        assert_eq!(r.i16().unwrap(), -3);
        assert_eq!(r.u32().unwrap(), 70000);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f64().unwrap(), -0.5);
        assert_eq!(r.string().unwrap(), "hi");
        assert_eq!(r.biguint().unwrap(), BigUint::from(0x0102u32));
        assert_eq!(r.biguint().unwrap(), BigUint::from(0u32));
        assert_eq!(r.i128().unwrap(), -5);
        r.finish().unwrap();
    }

    #[test]
    fn biguint_layout_is_length_then_magnitude() {
        let mut w = Writer::new();
        w.biguint(&BigUint::from(0x0102u32));
        assert_eq!(w.into_bytes(), vec![0, 0, 0, 2, 1, 2]);
    }

    #[test]
    fn truncation_and_trailing() {
        let mut r = Reader::new(&[0, 0, 0, 9, 1]);
        assert!(matches!(r.blob(), Err(WireError::Truncated { .. })));
        let mut r = Reader::new(&[1, 2]);
        r.u8().unwrap();
        assert_eq!(r.finish(), Err(WireError::Trailing(1)));
    }

    #[test]
    fn absurd_count_rejected() {
        let mut r = Reader::new(&[0xff, 0xff, 0xff, 0xff]);
        assert!(r.count(4).is_err());
    }
}
