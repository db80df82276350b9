use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Thread-safe tallies of primitive Paillier operations.
#[derive(Debug, Default)]
pub struct OpCounter {
    encrypt: AtomicU64,
    decrypt: AtomicU64,
    add_cipher: AtomicU64,
    add_plain: AtomicU64,
    mul_plain: AtomicU64,
    rerandomize: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub encrypt: u64,
    pub decrypt: u64,
    pub add_cipher: u64,
    pub add_plain: u64,
    pub mul_plain: u64,
    pub rerandomize: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn encrypt(&self, k: usize) {
        self.encrypt.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub(crate) fn decrypt(&self, k: usize) {
        self.decrypt.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub(crate) fn add_cipher(&self, k: usize) {
        self.add_cipher.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub(crate) fn add_plain(&self, k: usize) {
        self.add_plain.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub(crate) fn mul_plain(&self, k: usize) {
        self.mul_plain.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub(crate) fn rerandomize(&self, k: usize) {
        self.rerandomize.fetch_add(k as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            encrypt: self.encrypt.load(Ordering::Relaxed),
            decrypt: self.decrypt.load(Ordering::Relaxed),
            add_cipher: self.add_cipher.load(Ordering::Relaxed),
            add_plain: self.add_plain.load(Ordering::Relaxed),
            mul_plain: self.mul_plain.load(Ordering::Relaxed),
            rerandomize: self.rerandomize.load(Ordering::Relaxed),
        }
    }

    /// Overwrites the tallies, used when rolling back a failed step.
    pub fn restore(&self, c: OpCounts) {
        self.encrypt.store(c.encrypt, Ordering::Relaxed);
        self.decrypt.store(c.decrypt, Ordering::Relaxed);
        self.add_cipher.store(c.add_cipher, Ordering::Relaxed);
        self.add_plain.store(c.add_plain, Ordering::Relaxed);
        self.mul_plain.store(c.mul_plain, Ordering::Relaxed);
        self.rerandomize.store(c.rerandomize, Ordering::Relaxed);
    }
}

impl Clone for OpCounter {
    fn clone(&self) -> Self {
        let c = OpCounter::new();
        c.restore(self.snapshot());
        c
    }
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            encrypt: self.encrypt + o.encrypt,
            decrypt: self.decrypt + o.decrypt,
            add_cipher: self.add_cipher + o.add_cipher,
            add_plain: self.add_plain + o.add_plain,
            mul_plain: self.mul_plain + o.mul_plain,
            rerandomize: self.rerandomize + o.rerandomize,
        }
    }
}

impl Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, o: OpCounts) -> OpCounts {
        OpCounts {
            encrypt: self.encrypt - o.encrypt,
            decrypt: self.decrypt - o.decrypt,
            add_cipher: self.add_cipher - o.add_cipher,
            add_plain: self.add_plain - o.add_plain,
            mul_plain: self.mul_plain - o.mul_plain,
            rerandomize: self.rerandomize - o.rerandomize,
        }
    }
}
