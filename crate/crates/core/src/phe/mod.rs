//! Paillier additively homomorphic encryption with generator `g = n + 1`.

mod keyfile;
pub mod multiexp;
pub mod prime;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

pub use keyfile::{read_private_key, read_public_key, write_private_key, write_public_key};

/// Smallest modulus size accepted by [`keygen`].
pub const MIN_KEY_BITS: u32 = 512;

#[derive(Debug, Error)]
pub enum PheError {
    #[error("invalid key size {bits}: must be even and at least {MIN_KEY_BITS}")]
    InvalidKeySize { bits: u32 },
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("plaintext is not in [0, n)")]
    PlaintextOutOfRange,
    #[error("value is not a valid ciphertext for this key")]
    InvalidCiphertext,
    #[error("ciphertext is not invertible modulo n^2")]
    NotInvertible,
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    half_n: BigUint,
}

/// A raw Paillier ciphertext, an element of `Z*_{n^2}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext(pub(crate) BigUint);

#[derive(Clone)]
pub struct PrivateKey {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({} bits)", self.n.bits())
    }
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrivateKey({} bits, redacted)", self.public.n.bits())
    }
}

/// Generates a fresh key pair with a `bits`-bit modulus.
pub fn keygen<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> Result<(PublicKey, PrivateKey), PheError> {
    if bits < MIN_KEY_BITS || bits % 2 != 0 {
        return Err(PheError::InvalidKeySize { bits });
    }
    loop {
        let p = prime::random_prime(bits as u64 / 2, rng);
        let q = prime::random_prime(bits as u64 / 2, rng);
        match keypair_from_primes(&p, &q) {
            Ok(pair) if pair.0.n.bits() == bits as u64 => return Ok(pair),
            _ => continue,
        }
    }
}

/// Builds a key pair from explicit primes. Intended for tests and fixtures.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint) -> Result<(PublicKey, PrivateKey), PheError> {
    if p == q {
        return Err(PheError::InvalidKey("p and q must differ".into()));
    }
    let mut rng = rand::thread_rng();
    for (name, v) in [("p", p), ("q", q)] {
        if !prime::is_probable_prime(v, prime::MILLER_RABIN_ROUNDS, &mut rng) {
            return Err(PheError::InvalidKey(format!("{name} is not prime")));
        }
    }
    let n = p * q;
    let pm1 = p - 1u32;
    let qm1 = q - 1u32;
    if !n.gcd(&(&pm1 * &qm1)).is_one() {
        return Err(PheError::InvalidKey("gcd(pq, (p-1)(q-1)) != 1".into()));
    }
    let lambda = prime::lcm(&pm1, &qm1);
    from_parts(n, lambda)
}

/// Reassembles a key pair from `n` and `λ`, validating both.
pub(crate) fn from_parts(n: BigUint, lambda: BigUint) -> Result<(PublicKey, PrivateKey), PheError> {
    let public = PublicKey::from_modulus(n)?;
    // With g = n + 1, L(g^λ mod n^2) = λ mod n, so μ = λ^{-1} mod n.
    let mu = (&lambda % &public.n)
        .modinv(&public.n)
        .ok_or_else(|| PheError::InvalidKey("lambda is not invertible modulo n".into()))?;
    let private = PrivateKey { public: public.clone(), lambda, mu };
    Ok((public, private))
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, PheError> {
        if n < BigUint::from(15u32) || n.is_even() {
            return Err(PheError::InvalidKey("modulus must be an odd composite".into()));
        }
        let n_squared = &n * &n;
        let half_n = &n >> 1u32;
        Ok(Self { n, n_squared, half_n })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// `floor(n / 2)`: residues above it represent negative numbers.
    pub fn half_n(&self) -> &BigUint {
        &self.half_n
    }

    /// The generator, always `n + 1`.
    pub fn g(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Uniform `r ∈ Z*_n`.
    pub fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `r^n mod n^2`, the randomizing factor of an encryption.
    pub fn blinding_factor(&self, r: &BigUint) -> BigUint {
        r.modpow(&self.n, &self.n_squared)
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, PheError> {
        let r = self.random_unit(rng);
        self.encrypt_with_factor(m, &self.blinding_factor(&r))
    }

    /// Encrypts `m` with a precomputed `r^n mod n^2`.
    pub fn encrypt_with_factor(&self, m: &BigUint, factor: &BigUint) -> Result<Ciphertext, PheError> {
        if *m >= self.n {
            return Err(PheError::PlaintextOutOfRange);
        }
        Ok(Ciphertext(self.plain_factor(m) * factor % &self.n_squared))
    }

    /// `g^m = 1 + m·n mod n^2`.
    fn plain_factor(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + m * &self.n) % &self.n_squared
    }

    /// Checks that `c` lies in `Z*_{n^2}`.
    pub fn validate(&self, c: &Ciphertext) -> Result<(), PheError> {
        if c.0.is_zero() || c.0 >= self.n_squared || !c.0.gcd(&self.n).is_one() {
            return Err(PheError::InvalidCiphertext);
        }
        Ok(())
    }

    /// `Enc(m1) ⊕ Enc(m2) = Enc(m1 + m2)`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext(&a.0 * &b.0 % &self.n_squared)
    }

    /// `Enc(m) ⊕ k = Enc(m + k)` for a plaintext `k ∈ Z_n`.
    pub fn add_plain(&self, c: &Ciphertext, k: &BigUint) -> Ciphertext {
        Ciphertext(&c.0 * self.plain_factor(&(k % &self.n)) % &self.n_squared)
    }

    /// `k ⊗ Enc(m) = Enc(k·m)` for `k ∈ Z_n`.
    pub fn mul_plain(&self, c: &Ciphertext, k: &BigUint) -> Ciphertext {
        Ciphertext(c.0.modpow(&(k % &self.n), &self.n_squared))
    }

    /// `k ⊗ Enc(m)` for a signed scalar, using the ciphertext inverse when `k < 0`.
    pub fn mul_signed(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, PheError> {
        match k.sign() {
            Sign::Minus => {
                let inv = c.0.modinv(&self.n_squared).ok_or(PheError::NotInvertible)?;
                Ok(Ciphertext(inv.modpow(k.magnitude(), &self.n_squared)))
            }
            _ => Ok(Ciphertext(c.0.modpow(k.magnitude(), &self.n_squared))),
        }
    }

    /// Multiplies by a fresh `r^n`; the plaintext is unchanged.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &Ciphertext, rng: &mut R) -> Ciphertext {
        let r = self.random_unit(rng);
        self.rerandomize_with_factor(c, &self.blinding_factor(&r))
    }

    pub fn rerandomize_with_factor(&self, c: &Ciphertext, factor: &BigUint) -> Ciphertext {
        Ciphertext(&c.0 * factor % &self.n_squared)
    }

    /// Stable serialization: `n` as a length-prefixed big-endian integer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = crate::wire::Writer::new();
        w.biguint(&self.n);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PheError> {
        let mut r = crate::wire::Reader::new(bytes);
        let n = r.biguint().map_err(|e| PheError::InvalidKey(e.to_string()))?;
        r.finish().map_err(|e| PheError::InvalidKey(e.to_string()))?;
        Self::from_modulus(n)
    }
}

impl Ciphertext {
    pub fn from_raw(value: BigUint) -> Self {
        Self(value)
    }

    pub fn raw(&self) -> &BigUint {
        &self.0
    }

    pub fn into_raw(self) -> BigUint {
        self.0
    }
}

impl PrivateKey {
    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// `L(c^λ mod n^2)·μ mod n` with `L(u) = (u - 1) / n`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PheError> {
        let pk = &self.public;
        pk.validate(c)?;
        let u = c.0.modpow(&self.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok(l * &self.mu % &pk.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> (PublicKey, PrivateKey) {
        keypair_from_primes(&BigUint::from(11u32), &BigUint::from(13u32)).unwrap()
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn toy_key_parameters() {
        let (pk, sk) = toy();
        assert_eq!(pk.n(), &BigUint::from(143u32));
        assert_eq!(pk.g(), BigUint::from(144u32));
        assert_eq!(sk.lambda(), &BigUint::from(60u32));
        // 60 * 31 = 1860 = 13 * 143 + 1
        assert_eq!(sk.mu(), &BigUint::from(31u32));
    }

    #[test]
    fn toy_roundtrip_all_messages() {
        let (pk, sk) = toy();
        let mut rng = rng();
        for m in 0u32..143 {
            let c = pk.encrypt(&BigUint::from(m), &mut rng).unwrap();
            assert_eq!(sk.decrypt(&c).unwrap(), BigUint::from(m));
        }
    }

    #[test]
    fn toy_fixed_nonce_ciphertext() {
        // (1 + 5*143) * 2^143 mod 143^2, computed independently in Python.
        let (pk, _) = toy();
        let factor = pk.blinding_factor(&BigUint::from(2u32));
        let c = pk.encrypt_with_factor(&BigUint::from(5u32), &factor).unwrap();
        assert_eq!(c.raw(), &BigUint::from(13098u32));
    }

    #[test]
    fn toy_homomorphisms_wrap_mod_n() {
        let (pk, sk) = toy();
        let mut rng = rng();
        let a = pk.encrypt(&BigUint::from(100u32), &mut rng).unwrap();
        let b = pk.encrypt(&BigUint::from(50u32), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&a, &b)).unwrap(), BigUint::from(7u32));
        assert_eq!(sk.decrypt(&pk.add_plain(&a, &BigUint::from(43u32))).unwrap(), BigUint::zero());
        assert_eq!(sk.decrypt(&pk.mul_plain(&b, &BigUint::from(3u32))).unwrap(), BigUint::from(7u32));
        let neg = pk.mul_signed(&b, &BigInt::from(-1)).unwrap();
        assert_eq!(sk.decrypt(&neg).unwrap(), BigUint::from(93u32));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (pk, sk) = toy();
        let mut rng = rng();
        assert!(matches!(pk.encrypt(&BigUint::from(143u32), &mut rng), Err(PheError::PlaintextOutOfRange)));
        assert!(matches!(sk.decrypt(&Ciphertext(BigUint::zero())), Err(PheError::InvalidCiphertext)));
        assert!(matches!(sk.decrypt(&Ciphertext(BigUint::from(143u32 * 143))), Err(PheError::InvalidCiphertext)));
        assert!(matches!(sk.decrypt(&Ciphertext(BigUint::from(11u32))), Err(PheError::InvalidCiphertext)));
        assert!(keypair_from_primes(&BigUint::from(11u32), &BigUint::from(11u32)).is_err());
        assert!(keypair_from_primes(&BigUint::from(11u32), &BigUint::from(15u32)).is_err());
        // gcd(pq, (p-1)(q-1)) = 3 for p = 3, q = 7.
        assert!(keypair_from_primes(&BigUint::from(3u32), &BigUint::from(7u32)).is_err());
    }

    #[test]
    fn keygen_sizes() {
        let mut rng = rng();
        assert!(matches!(keygen(256, &mut rng), Err(PheError::InvalidKeySize { bits: 256 })));
        assert!(matches!(keygen(513, &mut rng), Err(PheError::InvalidKeySize { bits: 513 })));
        let (pk, sk) = keygen(512, &mut rng).unwrap();
        assert_eq!(pk.bits(), 512);
        let m = BigUint::from(123456789u64);
        assert_eq!(sk.decrypt(&pk.encrypt(&m, &mut rng).unwrap()).unwrap(), m);
    }

    #[test]
    fn rerandomize_changes_ciphertext_only() {
        let (pk, sk) = toy();
        let mut rng = rng();
        let c = pk.encrypt(&BigUint::from(9u32), &mut rng).unwrap();
        let d = pk.rerandomize(&c, &mut rng);
        assert_eq!(sk.decrypt(&d).unwrap(), BigUint::from(9u32));
    }

    #[test]
    fn public_key_bytes_roundtrip() {
        let (pk, _) = toy();
        assert_eq!(PublicKey::from_bytes(&pk.to_bytes()).unwrap(), pk);
        assert!(PublicKey::from_bytes(&[0, 0, 0, 1, 4]).is_err());
    }

    fn fixture() -> &'static (PublicKey, PrivateKey) {
        use std::sync::OnceLock;
        static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
        KEY.get_or_init(|| keygen(512, &mut ChaCha20Rng::seed_from_u64(99)).unwrap())
    }

    fn below_n() -> impl Strategy<Value = BigUint> {
        proptest::collection::vec(any::<u8>(), 1..64).prop_map(|b| BigUint::from_bytes_be(&b) % fixture().0.n())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip(m in below_n(), seed in any::<u64>()) {
            let (pk, sk) = fixture();
            let c = pk.encrypt(&m, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(sk.decrypt(&c).unwrap(), m);
        }

        #[test]
        fn additive(a in below_n(), b in below_n()) {
            let (pk, sk) = fixture();
            let mut rng = rng();
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            let cb = pk.encrypt(&b, &mut rng).unwrap();
            prop_assert_eq!(sk.decrypt(&pk.add(&ca, &cb)).unwrap(), (&a + &b) % pk.n());
            prop_assert_eq!(sk.decrypt(&pk.add_plain(&ca, &b)).unwrap(), (&a + &b) % pk.n());
        }

        #[test]
        fn scalar(a in below_n(), k in below_n(), s in any::<i64>()) {
            let (pk, sk) = fixture();
            let mut rng = rng();
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            prop_assert_eq!(sk.decrypt(&pk.mul_plain(&ca, &k)).unwrap(), (&a * &k) % pk.n());
            let signed = BigInt::from(s);
            let expect = (BigInt::from(a.clone()) * &signed).mod_floor(&BigInt::from(pk.n().clone()));
            prop_assert_eq!(BigInt::from(sk.decrypt(&pk.mul_signed(&ca, &signed).unwrap()).unwrap()), expect);
        }
    }
}
