//! Version-tagged binary model container.
//!
//! Layout: magic `VSCK`, version, element kind (0 real, 1 fixed), fraction
//! bits, layer count, then per layer its shape, a bias flag and row-major
//! weights, and finally the head shape and weights. Big-endian throughout.

use std::path::Path;

use super::arith::{Arith, Fixed, Float};
use super::layers::{DenseLayer, FeatureExtractor};
use super::model::{CentralModel, Head};
use super::{NnError, Tensor};
use crate::wire::{Reader, Writer};

const MAGIC: &[u8; 4] = b"VSCK";
const VERSION: u8 = 1;

/// Element types that can be stored in a checkpoint.
pub trait CheckpointArith: Arith {
    const KIND: u8;
    fn frac_bits(&self) -> u32;
    fn from_frac_bits(bits: u32) -> Result<Self, NnError>;
    fn put(w: &mut Writer, v: Self::Elem);
    fn get(r: &mut Reader<'_>) -> Result<Self::Elem, NnError>;
}

impl CheckpointArith for Float {
    const KIND: u8 = 0;
    fn frac_bits(&self) -> u32 {
        0
    }
    fn from_frac_bits(_: u32) -> Result<Self, NnError> {
        Ok(Float)
    }
    fn put(w: &mut Writer, v: f64) {
        w.f64(v);
    }
    fn get(r: &mut Reader<'_>) -> Result<f64, NnError> {
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(NnError::Checkpoint("non-finite weight".into()));
        }
        Ok(v)
    }
}

impl CheckpointArith for Fixed {
    const KIND: u8 = 1;
    fn frac_bits(&self) -> u32 {
        Fixed::frac_bits(self)
    }
    fn from_frac_bits(bits: u32) -> Result<Self, NnError> {
        Fixed::new(bits)
    }
    fn put(w: &mut Writer, v: i128) {
        w.i128(v);
    }
    fn get(r: &mut Reader<'_>) -> Result<i128, NnError> {
        Ok(r.i128()?)
    }
}

fn put_matrix<A: CheckpointArith>(w: &mut Writer, t: &Tensor<A::Elem>) {
    w.u32(t.rows() as u32).u32(t.cols() as u32);
    for &v in t.data() {
        A::put(w, v);
    }
}

fn get_matrix<A: CheckpointArith>(r: &mut Reader<'_>) -> Result<Tensor<A::Elem>, NnError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let len = rows.checked_mul(cols).ok_or_else(|| NnError::Checkpoint("shape overflow".into()))?;
    if len > r.remaining() {
        return Err(NnError::Checkpoint(format!("{rows}x{cols} matrix exceeds file size")));
    }
    let data = (0..len).map(|_| A::get(r)).collect::<Result<Vec<_>, _>>()?;
    Tensor::matrix(rows, cols, data)
}

pub fn encode<A: CheckpointArith>(model: &CentralModel<A>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC).u8(VERSION).u8(A::KIND).u32(model.arith().frac_bits());
    let layers = model.extractor.layers();
    w.u32(layers.len() as u32);
    for layer in layers {
        put_matrix::<A>(&mut w, &layer.w);
        match &layer.b {
            Some(b) => {
                w.u8(1);
                for &v in b {
                    A::put(&mut w, v);
                }
            }
            None => {
                w.u8(0);
            }
        }
    }
    put_matrix::<A>(&mut w, &model.head.w);
    w.into_bytes()
}

pub fn decode<A: CheckpointArith>(bytes: &[u8]) -> Result<CentralModel<A>, NnError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != A::KIND {
        return Err(NnError::Checkpoint(format!("element kind {kind} does not match {}", A::KIND)));
    }
    let arith = A::from_frac_bits(r.u32()?)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let w = get_matrix::<A>(&mut r)?;
        let b = match r.u8()? {
            0 => None,
            1 => Some((0..w.rows()).map(|_| A::get(&mut r)).collect::<Result<Vec<_>, _>>()?),
            f => return Err(NnError::Checkpoint(format!("bad bias flag {f}"))),
        };
        layers.push(DenseLayer { w, b });
    }
    let head = Head { w: get_matrix::<A>(&mut r)? };
    r.finish()?;
    let extractor = FeatureExtractor::new(arith.clone(), layers)?;
    CentralModel::from_parts(arith, extractor, head)
}

/// Reads only the element kind byte of a checkpoint.
pub fn kind(bytes: &[u8]) -> Result<u8, NnError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    Ok(bytes[5])
}

pub fn save<A: CheckpointArith>(path: &Path, model: &CentralModel<A>) -> Result<(), NnError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load<A: CheckpointArith>(path: &Path) -> Result<CentralModel<A>, NnError> {
    decode(&std::fs::read(path)?)
}
