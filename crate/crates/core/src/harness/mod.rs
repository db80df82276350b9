//! Datasets, training drivers, benchmarks and audits built on the
//! protocol.

mod audit;
mod dataset;
mod report;
mod sweep;
mod train;


use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::CodecError;
use crate::fixed::FixedError;
use crate::nn::NnError;
use crate::phe::PheError;
use crate::protocol::ProtocolError;
use crate::transport::TransportError;

pub use audit::{key_secrets, leakage_audit, AuditReport, BlindingFinding, RepeatedCiphertext};
pub use dataset::{load_csv, load_idx, split_indices, synthetic, CsvOptions, Dataset, Normalization, SplitSpec};
pub use report::{EpochReport, FinalMetrics, PhaseSeconds, RunReport, SweepPoint, SweepReport, Timing, TranscriptInfo};
pub use sweep::{bench_dimension_sweep, train_step_ops, HandlerOps, SweepOptions};
pub use train::{
    batch_schedule, drive, evaluate_protocol, serve_passive, session_config, train_active_remote, train_centralized, train_protocol, ActiveRun,
    Arithmetic, KeySource, PassiveRun, ProtocolModels, ProtocolOptions, ProtocolRun, TrainOptions, TrainedModel, TranscriptMode,
    TransportChoice,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("step {step}, message {tag}: {source}")]
    Step { step: u64, tag: &'static str, source: ProtocolError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] PheError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().to_path_buf(), source }
    }
}
