//! Binary key files: tag byte, format version, then length-prefixed integers.
//!
//! Public: `0x50 0x01 n g`. Private: `0x53 0x01 n g λ μ`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{from_parts, PheError, PrivateKey, PublicKey};
use crate::wire::{Reader, Writer};

const TAG_PUBLIC: u8 = 0x50;
const TAG_PRIVATE: u8 = 0x53;
const VERSION: u8 = 0x01;

fn header(r: &mut Reader<'_>, tag: u8) -> Result<(), PheError> {
    let bad = |m: String| PheError::KeyFile(m);
    let t = r.u8().map_err(|e| bad(e.to_string()))?;
    if t != tag {
        return Err(bad(format!("unexpected tag 0x{t:02x}, expected 0x{tag:02x}")));
    }
    let v = r.u8().map_err(|e| bad(e.to_string()))?;
    if v != VERSION {
        return Err(bad(format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn encode_public(pk: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(TAG_PUBLIC).u8(VERSION).biguint(pk.n()).biguint(&pk.g());
    w.into_bytes()
}

pub fn decode_public(bytes: &[u8]) -> Result<PublicKey, PheError> {
    let mut r = Reader::new(bytes);
    header(&mut r, TAG_PUBLIC)?;
    let (n, g) = read_n_g(&mut r)?;
    r.finish().map_err(|e| PheError::KeyFile(e.to_string()))?;
    let pk = PublicKey::from_modulus(n)?;
    check_g(&pk, &g)?;
    Ok(pk)
}

pub fn encode_private(sk: &PrivateKey) -> Vec<u8> {
    let mut w = Writer::new();
    let pk = sk.public_key();
    w.u8(TAG_PRIVATE).u8(VERSION).biguint(pk.n()).biguint(&pk.g()).biguint(sk.lambda()).biguint(sk.mu());
    w.into_bytes()
}

pub fn decode_private(bytes: &[u8]) -> Result<PrivateKey, PheError> {
    let mut r = Reader::new(bytes);
    header(&mut r, TAG_PRIVATE)?;
    let (n, g) = read_n_g(&mut r)?;
    let lambda = r.biguint().map_err(|e| PheError::KeyFile(e.to_string()))?;
    let mu = r.biguint().map_err(|e| PheError::KeyFile(e.to_string()))?;
    r.finish().map_err(|e| PheError::KeyFile(e.to_string()))?;
    let (pk, sk) = from_parts(n, lambda)?;
    check_g(&pk, &g)?;
    if sk.mu() != &mu {
        return Err(PheError::KeyFile("mu does not match lambda".into()));
    }
    Ok(sk)
}

fn read_n_g(r: &mut Reader<'_>) -> Result<(num_bigint::BigUint, num_bigint::BigUint), PheError> {
    let n = r.biguint().map_err(|e| PheError::KeyFile(e.to_string()))?;
    let g = r.biguint().map_err(|e| PheError::KeyFile(e.to_string()))?;
    Ok((n, g))
}

fn check_g(pk: &PublicKey, g: &num_bigint::BigUint) -> Result<(), PheError> {
    if *g != pk.g() {
        return Err(PheError::KeyFile("generator must be n + 1".into()));
    }
    Ok(())
}

pub fn write_public_key(path: &Path, pk: &PublicKey) -> Result<(), PheError> {
    fs::write(path, encode_public(pk))?;
    Ok(())
}

/// Writes the private key readable by the owner only.
pub fn write_private_key(path: &Path, sk: &PrivateKey) -> Result<(), PheError> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        file.set_permissions(fs::Permissions::from_mode(0o600))?;
    }
    file.write_all(&encode_private(sk))?;
    file.sync_all()?;
    Ok(())
}

pub fn read_public_key(path: &Path) -> Result<PublicKey, PheError> {
    decode_public(&fs::read(path)?)
}

pub fn read_private_key(path: &Path) -> Result<PrivateKey, PheError> {
    decode_private(&fs::read(path)?)
}
