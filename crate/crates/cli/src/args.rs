use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

/// Two-party split learning over Paillier encryption.
///
/// Machine-readable results go to stdout (JSON lines); progress and
/// diagnostics go to stderr.
#[derive(Debug, Parser)]
#[command(name = "vsplit", version, about, long_about = None)]
pub struct Cli {
    /// Run element-wise crypto on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Paillier key pair as PREFIX.pub and PREFIX.key.
    Keygen(KeygenArgs),
    /// Train locally, or run one party of a two-process session.
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time one encrypted inference across input widths.
    Bench(BenchArgs),
    /// Check a recorded transcript for leaks.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    /// Modulus size in bits.
    #[arg(long, default_value_t = 2048)]
    pub bits: u32,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Derive the key from a seed instead of OS entropy. For tests only.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing key files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    /// Both parties in this process.
    Local,
    /// Key holder; connects to a passive peer.
    Active,
    /// Label holder; waits for an active peer.
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Float,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

/// Dataset selection. Either a CSV file or an IDX image/label pair.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, value_name = "CSV")]
    pub dataset: Option<PathBuf>,
    /// Label column name or index [default: last column].
    #[arg(long)]
    pub label: Option<String>,
    /// Columns to one-hot encode.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Option<Vec<String>>,
    /// Expected number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// IDX image file (optionally gzipped).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file (optionally gzipped).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Keep only the first N IDX rows.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Standardize IDX pixels with one global mean and deviation.
    #[arg(long)]
    pub standardize: bool,
    /// Fraction of rows held out for testing [default: 0.2].
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

/// Model, optimizer and blinding settings. Flags override the config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Hidden layer widths of the feature extractor [default: 16].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Use bias terms in the feature extractor [default].
    #[arg(long = "bias", overrides_with = "no_bias")]
    #[serde(skip)]
    pub bias_flag: bool,
    /// Drop the bias terms.
    #[arg(long, overrides_with = "bias_flag")]
    #[serde(skip)]
    pub no_bias: bool,
    #[arg(skip)]
    pub bias: Option<bool>,
    /// Learning rate [default: 0.1].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per step [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Passes over the training split [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seeds initialization, shuffling and the split [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed-point fraction bits [default: 16].
    #[arg(long)]
    pub frac_bits: Option<u32>,
    /// Activation blinding bound, real units [default: 1024].
    #[arg(long)]
    pub noise_blind: Option<f64>,
    /// Weight noise bound per unit learning rate [default: 64].
    #[arg(long)]
    pub noise_weight: Option<f64>,
    /// Disable blinding noise. Insecure, for comparison runs.
    #[arg(long)]
    pub no_noise: bool,
    /// Evaluate on the test split every N epochs; 0 means the last only.
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Train a centralized baseline instead of running the protocol (local role).
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Private key file from `keygen`; otherwise a fresh key is generated.
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Size of a freshly generated key [default: 2048].
    #[arg(long)]
    pub key_bits: Option<u32>,
    /// Allow generated keys below 2048 bits.
    #[arg(long)]
    pub test_keys: bool,
    /// Seed the blinding noise instead of using OS entropy.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Address to listen on (passive role), e.g. 0.0.0.0:7000.
    #[arg(long)]
    pub listen: Option<String>,
    /// Address of the passive peer (active role).
    #[arg(long)]
    pub connect: Option<String>,
    /// Seconds to keep retrying the connection [default: 10].
    #[arg(long)]
    pub connect_timeout: Option<f64>,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Record every frame sent or received to this file.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Write this process's noise draws (JSON lines) for `audit`.
    #[arg(long)]
    pub record_noise: Option<PathBuf>,
    /// Save the trained model checkpoint (local role).
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train --save`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split seed; use the seed the model was trained with.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Input widths to time.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 320, 3072])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 84)]
    pub hidden: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 16)]
    pub frac_bits: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Private key file; otherwise a fresh key is generated.
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    pub key_bits: u32,
    /// Allow generated keys below 2048 bits.
    #[arg(long)]
    pub test_keys: bool,
    /// Write a gnuplot-ready table here.
    #[arg(long)]
    pub gnuplot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Transcript written by `train --transcript`.
    #[arg(long)]
    pub transcript: PathBuf,
    /// The key holder's private key.
    #[arg(long)]
    pub key: PathBuf,
    /// Noise records from `train --record-noise`; repeat for each party.
    #[arg(long)]
    pub noise: Vec<PathBuf>,
}
