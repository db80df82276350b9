use std::path::{Path, PathBuf};

use thiserror::Error;
use vsplit_core::codec::CodecError;
use vsplit_core::harness::HarnessError;
use vsplit_core::nn::NnError;
use vsplit_core::phe::PheError;
use vsplit_core::protocol::ProtocolError;
use vsplit_core::transport::TransportError;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CRYPTO: u8 = 3;
pub const EXIT_PROTOCOL: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("audit failed; offending frames: {frames:?}")]
    Audit { frames: Vec<usize> },
    #[error(transparent)]
    Crypto(#[from] PheError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Audit { .. } => EXIT_PROTOCOL,
            CliError::Crypto(e) => crypto_code(e),
            CliError::Nn(e) => nn_code(e),
            CliError::Transport(e) => transport_code(e),
            CliError::Harness(e) => harness_code(e),
        }
    }
}

fn crypto_code(e: &PheError) -> u8 {
    match e {
        PheError::Io(_) => EXIT_IO,
        _ => EXIT_CRYPTO,
    }
}

fn nn_code(e: &NnError) -> u8 {
    match e {
        NnError::Config(_) | NnError::Shape(_) => EXIT_CONFIG,
        NnError::Io(_) | NnError::Checkpoint(_) | NnError::Wire(_) => EXIT_IO,
        _ => EXIT_PROTOCOL,
    }
}

/// Unreachable peers and dropped links are I/O failures; a peer that
/// answers with the wrong thing is a protocol failure.
fn transport_code(e: &TransportError) -> u8 {
    match e {
        TransportError::Io(_) | TransportError::Timeout | TransportError::Closed => EXIT_IO,
        _ => EXIT_PROTOCOL,
    }
}

fn protocol_code(e: &ProtocolError) -> u8 {
    match e {
        ProtocolError::Config(_) => EXIT_CONFIG,
        ProtocolError::Crypto(e) => crypto_code(e),
        ProtocolError::Codec(CodecError::Crypto(e)) => crypto_code(e),
        ProtocolError::Transport(e) => transport_code(e),
        _ => EXIT_PROTOCOL,
    }
}

fn harness_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::Parse { .. } | HarnessError::Format(_) | HarnessError::Io { .. } => EXIT_IO,
        HarnessError::Diverged { .. } => EXIT_PROTOCOL,
        HarnessError::Step { source, .. } => protocol_code(source),
        HarnessError::Protocol(e) => protocol_code(e),
        HarnessError::Transport(e) => transport_code(e),
        HarnessError::Crypto(e) => crypto_code(e),
        HarnessError::Nn(e) => nn_code(e),
        HarnessError::Codec(_) => EXIT_CRYPTO,
        HarnessError::Fixed(_) => EXIT_PROTOCOL,
    }
}
