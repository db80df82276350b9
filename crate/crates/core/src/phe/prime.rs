use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

pub const MILLER_RABIN_ROUNDS: usize = 64;

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101,
    103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197,
    199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in std::iter::once(&2u32).chain(SMALL_PRIMES.iter()) {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let n_minus_2 = n - 2u32;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_2);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits with the top two bits set, so the
/// product of two such primes has exactly `2*bits` bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 16);
    loop {
        let mut cand = rng.gen_biguint(bits);
        cand.set_bit(bits - 1, true);
        cand.set_bit(bits - 2, true);
        cand.set_bit(0, true);
        if SMALL_PRIMES.iter().any(|&p| (&cand % p).is_zero()) {
            continue;
        }
        if is_probable_prime(&cand, MILLER_RABIN_ROUNDS, rng) {
            return cand;
        }
    }
}

pub fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let primes: Vec<u32> = (0u32..200).filter(|&k| is_probable_prime(&BigUint::from(k), 20, &mut rng)).collect();
        let sieve: Vec<u32> = (0u32..200).filter(|&k| k >= 2 && (2..k).all(|d| k % d != 0)).collect();
        assert_eq!(primes, sieve);
    }

    #[test]
    fn carmichael_and_known_primes() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&BigUint::from(c), 64, &mut rng), "{c}");
        }
        // 2^61 - 1 and 2^89 - 1 are Mersenne primes.
        let m61 = (BigUint::one() << 61u32) - 1u32;
        let m89 = (BigUint::one() << 89u32) - 1u32;
        assert!(is_probable_prime(&m61, 64, &mut rng));
        assert!(is_probable_prime(&m89, 64, &mut rng));
        assert!(!is_probable_prime(&(&m61 * &m89), 64, &mut rng));
    }

    #[test]
    fn random_prime_has_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = random_prime(128, &mut rng);
        assert_eq!(p.bits(), 128);
        assert!(p.bit(126));
    }
}
