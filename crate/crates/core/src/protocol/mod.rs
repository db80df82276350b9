//! The two party state machines and the sessions that drive them.
//!
//! The feature holder (active party) owns the Paillier key pair and the
//! feature extractor. The label holder (passive party) owns the labels and
//! the classifier weights, which it only ever holds in noisy form `W̃2`.
//!
//! Fixed-point scales used on the wire, with `f` fraction bits per unit:
//!
//! | message          | content                         | scale |
//! |------------------|---------------------------------|-------|
//! | ENC_ACTIVATION   | `[a]`                           | f     |
//! | NOISY_WSUM       | `[W̃2·a + ε_s]`                  | 3f    |
//! | DENOISED_WSUM    | `W2·a + ε_s`                    | 3f    |
//! | ENC_WGRAD        | `[Σ_b η g_b ⊗ a_b + ε_s']`      | 2f    |
//! | BLINDED_WGRAD    | `Σ_b η g_b ⊗ a_b + ε_s' - ε_w`, `[ε_acc]` | 2f |
//! | ENC_ACT_GRAD     | `[W2ᵀ g]`                       | 3f    |
//!
//! All noise is drawn on the full integer grid of its scale and removed
//! exactly by the party that drew it before any rounding happens.

mod active;
pub mod message;
mod passive;
mod session;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, PlainTensor};
use crate::fixed::{self, FixedError};
use crate::nn::{NnError, NoiseBounds};
use crate::phe::PheError;
use crate::transport::TransportError;

pub use active::ActiveParty;
pub use message::{Body, Control, DecodeContext, Metrics, Mode, ProtocolMessage, SessionConfig, Tag, PROTOCOL_VERSION};
pub use passive::PassiveParty;
pub use session::{run_passive, LocalSession, RemoteSession, Session, StepOutcome};

/// Accumulated weight noise must stay below `2^LEDGER_BITS` in real units.
pub const LEDGER_BITS: u32 = 16;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("message {got} for batch {id} arrived out of order (expected {expected})")]
    OutOfOrder { id: u64, expected: &'static str, got: &'static str },
    #[error("no in-flight state for batch {0}")]
    MissingCache(u64),
    #[error("batch id {0} is already in flight")]
    DuplicateBatch(u64),
    #[error("no label for sample {0}")]
    MissingLabel(u64),
    #[error("payload shape mismatch: {0}")]
    Shape(String),
    #[error("accumulated weight noise exceeds 2^{limit_bits} (needs {bits} bits); reset the session and re-key")]
    LedgerOverflow { bits: u32, limit_bits: u32 },
    #[error("unexpected control message: {0}")]
    UnexpectedControl(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Crypto(#[from] PheError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Blinding noise: uniform per coordinate on the fixed-point grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub bounds: NoiseBounds,
    /// Seed for the noise stream; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self { bounds: NoiseBounds::off(), seed: Some(0) }
    }

    pub fn seeded(bounds: NoiseBounds, seed: u64) -> Self {
        Self { bounds, seed: Some(seed) }
    }

    pub fn problems(&self) -> Vec<String> {
        let b = self.bounds;
        let mut out = Vec::new();
        if !(b.blind.is_finite() && b.blind >= 0.0 && b.weight.is_finite() && b.weight >= 0.0) {
            out.push(format!("noise bounds must be finite and non-negative, got blind={} weight={}", b.blind, b.weight));
        } else if (b.blind == 0.0) != (b.weight == 0.0) {
            out.push("noise bounds must both be positive (noise on) or both zero (noise off)".into());
        }
        if b.blind >= 2f64.powi(20) {
            out.push(format!("blinding bound {} must be below 2^20", b.blind));
        }
        if b.weight >= 2f64.powi(LEDGER_BITS as i32 - 4) {
            out.push(format!("weight noise bound {} must be below 2^{}", b.weight, LEDGER_BITS - 4));
        }
        out
    }
}

pub(crate) fn rng_from(seed: Option<u64>, stream: u64) -> ChaCha20Rng {
    match seed {
        Some(s) => crate::nn::seeded_rng(s, stream),
        None => ChaCha20Rng::from_entropy(),
    }
}

pub(crate) const STREAM_ACTIVE_NOISE: u64 = 10;
pub(crate) const STREAM_PASSIVE_NOISE: u64 = 11;
pub(crate) const STREAM_ACTIVE_CRYPTO: u64 = 12;
pub(crate) const STREAM_PASSIVE_CRYPTO: u64 = 13;

/// Uniform integers in `[-M, M]` with `M = round(bound·2^bits)`.
pub(crate) fn grid_noise<R: Rng>(rng: &mut R, bound: f64, bits: u32, dims: Vec<usize>) -> Result<PlainTensor, ProtocolError> {
    let m = fixed::to_fixed(bound, bits)?;
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| if m == 0 { 0 } else { rng.gen_range(-m..=m) }).collect();
    Ok(PlainTensor::new(dims, bits, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Encrypt,
    Homomorphic,
    Decrypt,
    Plaintext,
    Transport,
}

/// Wall time spent per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub encrypt: Duration,
    pub homomorphic: Duration,
    pub decrypt: Duration,
    pub plaintext: Duration,
    pub transport: Duration,
}

impl PhaseTimes {
    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(phase, start.elapsed());
        out
    }

    pub fn add(&mut self, phase: Phase, d: Duration) {
        let slot = match phase {
            Phase::Encrypt => &mut self.encrypt,
            Phase::Homomorphic => &mut self.homomorphic,
            Phase::Decrypt => &mut self.decrypt,
            Phase::Plaintext => &mut self.plaintext,
            Phase::Transport => &mut self.transport,
        };
        *slot += d;
    }

    pub fn total(&self) -> Duration {
        self.encrypt + self.homomorphic + self.decrypt + self.plaintext + self.transport
    }

    pub fn merged(&self, o: &PhaseTimes) -> PhaseTimes {
        PhaseTimes {
            encrypt: self.encrypt + o.encrypt,
            homomorphic: self.homomorphic + o.homomorphic,
            decrypt: self.decrypt + o.decrypt,
            plaintext: self.plaintext + o.plaintext,
            transport: self.transport + o.transport,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    /// `ε_s` added to the weighted sum (passive).
    SumBlind,
    /// `ε_s'` added to the weight gradient (passive).
    GradBlind,
    /// `ε_w` subtracted from the weight gradient (active).
    Weight,
}

/// One noise draw, kept only when recording is enabled (tests and audits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub id: u64,
    pub step: u32,
    pub kind: NoiseKind,
    pub scale: u32,
    pub values: Vec<i128>,
}

impl NoiseRecord {
    pub(crate) fn new(id: u64, step: u32, kind: NoiseKind, t: &PlainTensor) -> Self {
        Self { id, step, kind, scale: t.scale(), values: t.data().to_vec() }
    }
}

pub(crate) fn expect_dims(what: &str, got: &[usize], want: &[usize]) -> Result<(), ProtocolError> {
    if got != want {
        return Err(ProtocolError::Shape(format!("{what}: expected dims {want:?}, got {got:?}")));
    }
    Ok(())
}

pub(crate) fn expect_scale(what: &str, got: u32, want: u32) -> Result<(), ProtocolError> {
    if got != want {
        return Err(ProtocolError::Shape(format!("{what}: expected scale {want} bits, got {got}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_noise_respects_bound() {
        let mut rng = crate::nn::seeded_rng(1, 1);
        let t = grid_noise(&mut rng, 2.0, 4, vec![100]).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 32));
        assert!(t.data().iter().any(|&v| v != 0));
        let z = grid_noise(&mut rng, 0.0, 4, vec![3]).unwrap();
        assert_eq!(z.data(), &[0, 0, 0]);
    }

    #[test]
    fn noise_config_problems() {
        assert!(NoiseConfig::off().problems().is_empty());
        assert!(NoiseConfig::seeded(NoiseBounds::default(), 1).problems().is_empty());
        assert_eq!(NoiseConfig::seeded(NoiseBounds { blind: 1.0, weight: 0.0 }, 1).problems().len(), 1);
        assert_eq!(NoiseConfig::seeded(NoiseBounds { blind: -1.0, weight: 1.0 }, 1).problems().len(), 1);
    }

    #[test]
    fn phase_times_accumulate() {
        let mut p = PhaseTimes::default();
        p.add(Phase::Encrypt, Duration::from_millis(3));
        p.add(Phase::Transport, Duration::from_millis(2));
        assert_eq!(p.total(), Duration::from_millis(5));
        assert_eq!(p.time(Phase::Plaintext, || 7), 7);
    }
}

#[cfg(test)]
#[path = "tests.rs"]
mod session_tests;
