//! Plaintext neural-network kernel: dense layers, ReLU, softmax
//! cross-entropy, analytic backprop and SGD, in real or fixed-point
//! arithmetic.

pub mod arith;
pub mod checkpoint;
mod layers;
pub mod loss;
mod model;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::FixedError;
use crate::wire::WireError;

pub use arith::{Arith, Fixed, Float};
pub use layers::{dense_forward, init_uniform, relu, relu_backward, sgd_step, DenseLayer, FeatureExtractor, ForwardCache, LayerStep};
pub use model::{argmax_rows, encode_inputs, head_input_grad, head_logits, head_step, scale_gradient, softmax_xent, CentralModel, Gradients, Head};
pub use tensor::Tensor;

pub const STREAM_EXTRACTOR: u64 = 1;
pub const STREAM_HEAD: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;

/// ChaCha20 generator for `seed` on an independent `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("training diverged: loss is not finite")]
    Diverged,
    #[error("forward cache missing or incomplete")]
    MissingCache,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer widths of the split model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Extractor widths; the last is `d_h`.
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub bias: bool,
}

impl Architecture {
    pub fn hidden_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&0)
    }

    /// `[d_in, h1, ..., d_h]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.hidden.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NnError::Config("input and hidden widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(NnError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Blinding noise magnitudes, in real units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    /// `ε_s`: uniform per coordinate in `[-blind, blind]`.
    pub blind: f64,
    /// `δ`: the per-step weight noise is uniform in `[-η·weight, η·weight]`.
    pub weight: f64,
}

impl NoiseBounds {
    pub const DEFAULT_BLIND: f64 = 1024.0;
    pub const DEFAULT_WEIGHT: f64 = 64.0;

    pub fn off() -> Self {
        Self { blind: 0.0, weight: 0.0 }
    }

    pub fn is_off(&self) -> bool {
        self.blind == 0.0 && self.weight == 0.0
    }
}

impl Default for NoiseBounds {
    fn default() -> Self {
        Self { blind: Self::DEFAULT_BLIND, weight: Self::DEFAULT_WEIGHT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frac_bits: u32,
    pub noise: NoiseBounds,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { lr: 0.1, batch_size: 8, epochs: 10, seed: 0, frac_bits: 32, noise: NoiseBounds::default() }
    }
}

impl Hyperparams {
    /// Every problem with the settings, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            out.push(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            out.push("batch size must be at least 1".into());
        }
        if self.frac_bits == 0 || self.frac_bits > crate::fixed::MAX_FRAC_BITS {
            out.push(format!("fraction bits must be in 1..={}, got {}", crate::fixed::MAX_FRAC_BITS, self.frac_bits));
        }
        for (name, v) in [("blind", self.noise.blind), ("weight", self.noise.weight)] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("noise bound {name} must be finite and non-negative, got {v}"));
            }
        }
        if (self.noise.blind == 0.0) != (self.noise.weight == 0.0) {
            out.push("noise bounds must both be positive (noise on) or both zero (noise off)".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(NnError::Config(p.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparam_problems_are_all_listed() {
        let hp = Hyperparams { lr: -1.0, batch_size: 0, frac_bits: 40, noise: NoiseBounds { blind: 1.0, weight: 0.0 }, ..Default::default() };
        assert_eq!(hp.problems().len(), 4);
        assert!(Hyperparams::default().validate().is_ok());
    }

    #[test]
    fn streams_are_independent() {
        use rand::RngCore;
        let a = seeded_rng(1, STREAM_HEAD).next_u64();
        let b = seeded_rng(1, STREAM_EXTRACTOR).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, seeded_rng(1, STREAM_HEAD).next_u64());
    }
}
