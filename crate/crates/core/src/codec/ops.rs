use num_bigint::{BigInt, BigUint};
use rand::RngCore;

use super::{CipherTensor, CodecError, FixedScale, OpCounter, OpCounts, PlainTensor};
use crate::par;
use crate::phe::multiexp::{batch_invert, multi_exp, PowTable};
use crate::phe::{Ciphertext, PheError, PrivateKey, PublicKey};

/// Homomorphic evaluation context: a public key, its fixed-point scale and
/// an operation counter.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pk: PublicKey,
    fs: FixedScale,
    ops: OpCounter,
}

/// Interprets `[d]` as one row and `[b, d]` as `b` rows.
fn rows(dims: &[usize]) -> Result<(usize, usize, bool), CodecError> {
    match dims {
        [d] => Ok((1, *d, true)),
        [b, d] => Ok((*b, *d, false)),
        _ => Err(CodecError::Shape(format!("expected a vector or matrix, got dims {dims:?}"))),
    }
}

fn sum_abs_bits<'a>(values: impl Iterator<Item = &'a i128>) -> u64 {
    let total = values.fold(0u128, |acc, v| acc.saturating_add(v.unsigned_abs()));
    (128 - total.leading_zeros()) as u64
}

impl Evaluator {
    pub fn new(pk: PublicKey, frac_bits: u32) -> Result<Self, CodecError> {
        let fs = FixedScale::for_key(frac_bits, &pk)?;
        Ok(Self::with_scale(pk, fs))
    }

    pub fn with_scale(pk: PublicKey, fs: FixedScale) -> Self {
        Self { pk, fs, ops: OpCounter::new() }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn scale(&self) -> &FixedScale {
        &self.fs
    }

    pub fn ops(&self) -> &OpCounter {
        &self.ops
    }

    pub fn counts(&self) -> OpCounts {
        self.ops.snapshot()
    }

    /// Public magnitude bound for fresh operands at `scale` fraction bits.
    pub fn fresh_bound(&self, scale: u32) -> u32 {
        self.fs.operand_bits() + scale
    }

    fn checked_bound(&self, bits: u64) -> Result<u32, CodecError> {
        let cap = self.fs.capacity_bits();
        if bits > cap {
            return Err(CodecError::ResultOverflow { needed_bits: bits, available_bits: cap });
        }
        Ok(bits as u32)
    }

    /// `count` fresh randomizers `r^n mod n^2`. Units are drawn in order from
    /// `rng`; only the exponentiations are distributed.
    pub fn blinding_factors<R: RngCore + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<BigUint> {
        let units: Vec<BigUint> = (0..count).map(|_| self.pk.random_unit(rng)).collect();
        par::map_indexed(count, |i| self.pk.blinding_factor(&units[i]))
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, p: &PlainTensor, rng: &mut R) -> Result<CipherTensor, CodecError> {
        let bound = self.fresh_bound(p.scale());
        if p.max_abs_bits() > bound {
            return Err(CodecError::OperandBound { bound_bits: bound });
        }
        let encoded = p.data().iter().map(|&v| self.fs.encode_int(v)).collect::<Result<Vec<_>, _>>()?;
        let factors = self.blinding_factors(encoded.len(), rng);
        let data = par::try_map_indexed(encoded.len(), |i| self.pk.encrypt_with_factor(&encoded[i], &factors[i]))?;
        self.ops.encrypt(data.len());
        CipherTensor::new(p.dims().to_vec(), p.scale(), data, bound)
    }

    /// Encrypts a real vector at the base scale.
    pub fn encrypt_reals<R: RngCore + ?Sized>(&self, values: &[f64], rng: &mut R) -> Result<CipherTensor, CodecError> {
        let p = PlainTensor::encode(vec![values.len()], self.fs.frac_bits(), values)?;
        self.encrypt(&p, rng)
    }

    pub fn decrypt(&self, sk: &PrivateKey, c: &CipherTensor) -> Result<PlainTensor, CodecError> {
        if sk.public_key() != &self.pk {
            return Err(CodecError::Crypto(PheError::InvalidKey("private key does not match evaluator key".into())));
        }
        let data = par::try_map_indexed(c.len(), |i| -> Result<i128, CodecError> {
            let m = sk.decrypt(&c.data[i])?;
            self.fs.decode_int(&m)
        })?;
        self.ops.decrypt(data.len());
        PlainTensor::new(c.dims.clone(), c.scale, data)
    }

    pub fn decrypt_reals(&self, sk: &PrivateKey, c: &CipherTensor) -> Result<Vec<f64>, CodecError> {
        Ok(self.decrypt(sk, c)?.to_reals())
    }

    fn tables(&self, bases: &[&Ciphertext], needs_neg: &[bool]) -> Result<Vec<PowTable>, CodecError> {
        let n2 = self.pk.n_squared();
        let to_invert: Vec<&BigUint> = bases.iter().zip(needs_neg).filter(|(_, &n)| n).map(|(c, _)| c.raw()).collect();
        let inverses = batch_invert(&to_invert, n2).ok_or(PheError::NotInvertible)?;
        let mut slot = vec![None; bases.len()];
        let mut next = 0;
        for (i, &neg) in needs_neg.iter().enumerate() {
            if neg {
                slot[i] = Some(next);
                next += 1;
            }
        }
        Ok(par::map_indexed(bases.len(), |i| PowTable::from_parts(bases[i].raw(), slot[i].map(|s| &inverses[s]), n2)))
    }

    /// `W ⊗ [v]`: plaintext matrix `[r, d]` times encrypted vector `[d]`, or
    /// row-wise for an encrypted batch `[b, d]` giving `[b, r]`.
    pub fn matvec(&self, w: &PlainTensor, v: &CipherTensor) -> Result<CipherTensor, CodecError> {
        let (r, wd) = match w.dims() {
            [r, d] => (*r, *d),
            dims => return Err(CodecError::Shape(format!("weight must be a matrix, got {dims:?}"))),
        };
        let (batch, d, single) = rows(&v.dims)?;
        if wd != d {
            return Err(CodecError::Shape(format!("matrix has {wd} columns, vector has {d} entries")));
        }
        let row_bits = (0..r).map(|j| sum_abs_bits(w.data()[j * d..(j + 1) * d].iter())).max().unwrap_or(0);
        let bound = self.checked_bound(row_bits + v.bound_bits as u64)?;
        let exps: Vec<BigInt> = w.data().iter().map(|&x| BigInt::from(x)).collect();
        let neg_col: Vec<bool> = (0..d).map(|k| (0..r).any(|j| w.data()[j * d + k] < 0)).collect();
        let bases: Vec<&Ciphertext> = v.data.iter().collect();
        let needs: Vec<bool> = (0..batch * d).map(|i| neg_col[i % d]).collect();
        let tables = self.tables(&bases, &needs)?;
        let n2 = self.pk.n_squared();
        let data = par::map_indexed(batch * r, |idx| {
            let (b, j) = (idx / r, idx % r);
            let terms: Vec<(&PowTable, &BigInt)> = (0..d).map(|k| (&tables[b * d + k], &exps[j * d + k])).collect();
            Ciphertext::from_raw(multi_exp(&terms, n2))
        });
        self.ops.mul_plain(batch * r * d);
        self.ops.add_cipher(batch * r * d.saturating_sub(1));
        let dims = if single { vec![r] } else { vec![batch, r] };
        CipherTensor::new(dims, w.scale() + v.scale, data, bound)
    }

    /// `Σ_b g_b ⊗ [a_b]ᵀ`: sum of outer products of plaintext rows `[b, c]`
    /// with encrypted rows `[b, d]`, giving `[c, d]`. Vectors count as `b = 1`.
    pub fn outer_sum(&self, g: &PlainTensor, a: &CipherTensor) -> Result<CipherTensor, CodecError> {
        let (gb, c, _) = rows(g.dims())?;
        let (batch, d, _) = rows(&a.dims)?;
        if gb != batch {
            return Err(CodecError::Shape(format!("batch sizes differ: {gb} vs {batch}")));
        }
        let gd = g.data();
        let col_bits = (0..c).map(|j| sum_abs_bits((0..batch).map(|b| &gd[b * c + j]))).max().unwrap_or(0);
        let bound = self.checked_bound(col_bits + a.bound_bits as u64)?;
        let exps: Vec<BigInt> = gd.iter().map(|&x| BigInt::from(x)).collect();
        let neg_row: Vec<bool> = (0..batch).map(|b| gd[b * c..(b + 1) * c].iter().any(|&x| x < 0)).collect();
        let bases: Vec<&Ciphertext> = a.data.iter().collect();
        let needs: Vec<bool> = (0..batch * d).map(|i| neg_row[i / d]).collect();
        let tables = self.tables(&bases, &needs)?;
        let n2 = self.pk.n_squared();
        let data = par::map_indexed(c * d, |idx| {
            let (j, k) = (idx / d, idx % d);
            let terms: Vec<(&PowTable, &BigInt)> = (0..batch).map(|b| (&tables[b * d + k], &exps[b * c + j])).collect();
            Ciphertext::from_raw(multi_exp(&terms, n2))
        });
        self.ops.mul_plain(batch * c * d);
        self.ops.add_cipher(batch.saturating_sub(1) * c * d);
        CipherTensor::new(vec![c, d], g.scale() + a.scale, data, bound)
    }

    /// `gᵀ ⊗ [C]`: plaintext row(s) `[r]` or `[b, r]` times encrypted matrix
    /// `[r, d]`, giving `[d]` or `[b, d]`.
    pub fn vecmat(&self, m: &CipherTensor, g: &PlainTensor) -> Result<CipherTensor, CodecError> {
        let (r, d) = match m.dims.as_slice() {
            [r, d] => (*r, *d),
            dims => return Err(CodecError::Shape(format!("encrypted operand must be a matrix, got {dims:?}"))),
        };
        let (batch, gr, single) = rows(g.dims())?;
        if gr != r {
            return Err(CodecError::Shape(format!("vector has {gr} entries, matrix has {r} rows")));
        }
        let gd = g.data();
        let row_bits = (0..batch).map(|b| sum_abs_bits(gd[b * r..(b + 1) * r].iter())).max().unwrap_or(0);
        let bound = self.checked_bound(row_bits + m.bound_bits as u64)?;
        let exps: Vec<BigInt> = gd.iter().map(|&x| BigInt::from(x)).collect();
        let neg_row: Vec<bool> = (0..r).map(|j| (0..batch).any(|b| gd[b * r + j] < 0)).collect();
        let bases: Vec<&Ciphertext> = m.data.iter().collect();
        let needs: Vec<bool> = (0..r * d).map(|i| neg_row[i / d]).collect();
        let tables = self.tables(&bases, &needs)?;
        let n2 = self.pk.n_squared();
        let data = par::map_indexed(batch * d, |idx| {
            let (b, k) = (idx / d, idx % d);
            let terms: Vec<(&PowTable, &BigInt)> = (0..r).map(|j| (&tables[j * d + k], &exps[b * r + j])).collect();
            Ciphertext::from_raw(multi_exp(&terms, n2))
        });
        self.ops.mul_plain(batch * r * d);
        self.ops.add_cipher(batch * r.saturating_sub(1) * d);
        let dims = if single { vec![d] } else { vec![batch, d] };
        CipherTensor::new(dims, g.scale() + m.scale, data, bound)
    }

    /// Element-wise `[c] ⊕ p` for a plaintext tensor at the same scale.
    pub fn add_plain(&self, c: &CipherTensor, p: &PlainTensor) -> Result<CipherTensor, CodecError> {
        if c.dims != p.dims() {
            return Err(CodecError::Shape(format!("dims {:?} vs {:?}", c.dims, p.dims())));
        }
        if c.scale != p.scale() {
            return Err(CodecError::Scale { left: c.scale, right: p.scale() });
        }
        let bound = self.checked_bound(c.bound_bits.max(p.max_abs_bits()) as u64 + 1)?;
        let encoded = p.data().iter().map(|&v| self.fs.encode_int(v)).collect::<Result<Vec<_>, _>>()?;
        let data = par::map_indexed(c.len(), |i| self.pk.add_plain(&c.data[i], &encoded[i]));
        self.ops.add_plain(data.len());
        CipherTensor::new(c.dims.clone(), c.scale, data, bound)
    }

    /// Element-wise `[a] ⊕ [b]`.
    pub fn add(&self, a: &CipherTensor, b: &CipherTensor) -> Result<CipherTensor, CodecError> {
        if a.dims != b.dims {
            return Err(CodecError::Shape(format!("dims {:?} vs {:?}", a.dims, b.dims)));
        }
        if a.scale != b.scale {
            return Err(CodecError::Scale { left: a.scale, right: b.scale });
        }
        let bound = self.checked_bound(a.bound_bits.max(b.bound_bits) as u64 + 1)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| self.pk.add(x, y)).collect();
        self.ops.add_cipher(a.len());
        CipherTensor::new(a.dims.clone(), a.scale, data, bound)
    }

    /// Multiplies every element by a fresh `r^n`.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &CipherTensor, rng: &mut R) -> CipherTensor {
        let factors = self.blinding_factors(c.len(), rng);
        let data = c.data.iter().zip(&factors).map(|(x, f)| self.pk.rerandomize_with_factor(x, f)).collect();
        self.ops.rerandomize(c.len());
        CipherTensor { dims: c.dims.clone(), scale: c.scale, data, bound_bits: c.bound_bits }
    }
}
