//! Flag and config-file resolution. Explicit flags win over the file, the
//! file wins over built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use vsplit_core::harness::{CsvOptions, SplitSpec, TrainOptions};
use vsplit_core::nn::{Architecture, Hyperparams, NoiseBounds};

use crate::args::{Baseline, DataArgs, ModelArgs, Role, TrainArgs};
use crate::error::CliError;

pub const SECURE_KEY_BITS: u32 = 2048;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataArgs,
    pub model: ModelArgs,
    pub protocol: ProtocolFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolFile {
    pub baseline: Option<Baseline>,
    pub key: Option<PathBuf>,
    pub key_bits: Option<u32>,
    pub test_keys: bool,
    pub noise_seed: Option<u64>,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub connect_timeout: Option<f64>,
}

pub fn read_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {}", path.display(), e.message())]))
}

/// Where the rows come from.
#[derive(Debug, Clone)]
pub enum Source {
    Csv { path: PathBuf, opts: CsvOptions },
    Idx { images: PathBuf, labels: PathBuf, limit: Option<usize>, standardize: bool },
}

#[derive(Debug, Clone)]
pub struct DataPlan {
    pub source: Source,
    pub split: SplitSpec,
    pub classes: Option<usize>,
}

/// Fills `flags` from `file` wherever a flag was not given.
pub fn merge_data(flags: &DataArgs, file: &DataArgs) -> DataArgs {
    DataArgs {
        dataset: flags.dataset.clone().or_else(|| file.dataset.clone()),
        label: flags.label.clone().or_else(|| file.label.clone()),
        categorical: flags.categorical.clone().or_else(|| file.categorical.clone()),
        classes: flags.classes.or(file.classes),
        images: flags.images.clone().or_else(|| file.images.clone()),
        labels: flags.labels.clone().or_else(|| file.labels.clone()),
        limit: flags.limit.or(file.limit),
        standardize: flags.standardize || file.standardize,
        test_fraction: flags.test_fraction.or(file.test_fraction),
    }
}

pub fn merge_model(flags: &ModelArgs, file: &ModelArgs) -> ModelArgs {
    let bias = if flags.no_bias {
        Some(false)
    } else if flags.bias_flag {
        Some(true)
    } else {
        file.bias
    };
    ModelArgs {
        hidden: flags.hidden.clone().or_else(|| file.hidden.clone()),
        bias_flag: false,
        no_bias: false,
        bias,
        lr: flags.lr.or(file.lr),
        batch_size: flags.batch_size.or(file.batch_size),
        epochs: flags.epochs.or(file.epochs),
        seed: flags.seed.or(file.seed),
        frac_bits: flags.frac_bits.or(file.frac_bits),
        noise_blind: flags.noise_blind.or(file.noise_blind),
        noise_weight: flags.noise_weight.or(file.noise_weight),
        no_noise: flags.no_noise || file.no_noise,
        eval_every: flags.eval_every.or(file.eval_every),
    }
}

/// Checks the data flags, pushing every problem found.
pub fn data_plan(d: &DataArgs, seed: u64, problems: &mut Vec<String>) -> Option<DataPlan> {
    let test_fraction = d.test_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&test_fraction) {
        problems.push(format!("--test-fraction must be in [0, 1), got {test_fraction}"));
    }
    let split = SplitSpec { test_fraction, seed };
    let idx_given = d.images.is_some() || d.labels.is_some();
    let source = match (&d.dataset, idx_given) {
        (Some(_), true) => {
            problems.push("give either --dataset or --images/--labels, not both".into());
            None
        }
        (None, false) => {
            problems.push("no dataset: give --dataset FILE.csv or --images and --labels".into());
            None
        }
        (Some(path), false) => {
            if d.limit.is_some() || d.standardize {
                problems.push("--limit and --standardize apply to IDX data only".into());
            }
            let label = match &d.label {
                Some(l) => l.clone(),
                None => last_header(path).unwrap_or_default(),
            };
            let opts = CsvOptions { label, categorical: d.categorical.clone().unwrap_or_default(), classes: d.classes, split };
            Some(Source::Csv { path: path.clone(), opts })
        }
        (None, true) => {
            if d.label.is_some() || d.categorical.is_some() {
                problems.push("--label and --categorical apply to CSV data only".into());
            }
            match (&d.images, &d.labels) {
                (Some(images), Some(labels)) => {
                    Some(Source::Idx { images: images.clone(), labels: labels.clone(), limit: d.limit, standardize: d.standardize })
                }
                _ => {
                    problems.push("IDX data needs both --images and --labels".into());
                    None
                }
            }
        }
    };
    source.map(|source| DataPlan { source, split, classes: d.classes })
}

/// Header name of the last CSV column; the load reports any real problem.
fn last_header(path: &Path) -> Option<String> {
    let file = std::fs::File::open(path).ok()?;
    let header = std::io::BufRead::lines(std::io::BufReader::new(file)).next()?.ok()?;
    header.rsplit(',').next().map(|h| h.trim().to_string())
}

/// Everything `train` needs, validated.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub role: Role,
    pub data: DataPlan,
    pub hidden: Vec<usize>,
    pub bias: bool,
    pub hp: Hyperparams,
    pub eval_every: usize,
    pub baseline: Option<Baseline>,
    pub key: Option<PathBuf>,
    pub key_bits: u32,
    pub noise_seed: Option<u64>,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub wait: Duration,
}

impl TrainPlan {
    pub fn options(&self, input_dim: usize, classes: usize) -> TrainOptions {
        TrainOptions {
            arch: Architecture { input_dim, hidden: self.hidden.clone(), classes, bias: self.bias },
            hp: self.hp.clone(),
            eval_every: self.eval_every,
        }
    }
}

pub fn train_plan(args: &TrainArgs) -> Result<TrainPlan, CliError> {
    let file = match &args.config {
        Some(p) => read_config(p)?,
        None => FileConfig::default(),
    };
    let data = merge_data(&args.data, &file.data);
    let model = merge_model(&args.model, &file.model);
    let proto = &file.protocol;
    let mut problems = Vec::new();

    let seed = model.seed.unwrap_or(0);
    let plan = data_plan(&data, seed, &mut problems);

    let hidden = model.hidden.clone().unwrap_or_else(|| vec![16]);
    if hidden.is_empty() || hidden.contains(&0) {
        problems.push(format!("--hidden widths must be positive, got {hidden:?}"));
    }
    let noise = if model.no_noise {
        if model.noise_blind.is_some() || model.noise_weight.is_some() {
            problems.push("--no-noise conflicts with --noise-blind/--noise-weight".into());
        }
        NoiseBounds::off()
    } else {
        NoiseBounds {
            blind: model.noise_blind.unwrap_or(NoiseBounds::DEFAULT_BLIND),
            weight: model.noise_weight.unwrap_or(NoiseBounds::DEFAULT_WEIGHT),
        }
    };
    let hp = Hyperparams {
        lr: model.lr.unwrap_or(0.1),
        batch_size: model.batch_size.unwrap_or(8),
        epochs: model.epochs.unwrap_or(10),
        seed,
        frac_bits: model.frac_bits.unwrap_or(16),
        noise,
    };
    problems.extend(hp.problems());
    if hp.epochs == 0 {
        problems.push("--epochs must be at least 1".into());
    }

    let baseline = args.baseline.or(proto.baseline);
    let key = args.key.clone().or_else(|| proto.key.clone());
    let key_bits = args.key_bits.or(proto.key_bits);
    let listen = args.listen.clone().or_else(|| proto.listen.clone());
    let connect = args.connect.clone().or_else(|| proto.connect.clone());
    let wait = args.connect_timeout.or(proto.connect_timeout).unwrap_or(10.0);
    if !(wait.is_finite() && wait > 0.0) {
        problems.push(format!("--connect-timeout must be positive, got {wait}"));
    }
    if key.is_some() && key_bits.is_some() {
        problems.push("give either --key or --key-bits, not both".into());
    }
    let key_bits = key_bits.unwrap_or(SECURE_KEY_BITS);
    if key.is_none() && key_bits < SECURE_KEY_BITS && !(args.test_keys || proto.test_keys) {
        problems.push(format!("--key-bits {key_bits} is below {SECURE_KEY_BITS}; add --test-keys to allow it"));
    }

    match args.role {
        Role::Local => {
            if listen.is_some() || connect.is_some() {
                problems.push("--listen and --connect need --role active or passive".into());
            }
        }
        Role::Active => {
            if connect.is_none() {
                problems.push("--role active needs --connect HOST:PORT".into());
            }
            if listen.is_some() {
                problems.push("--listen is for --role passive".into());
            }
        }
        Role::Passive => {
            if listen.is_none() {
                problems.push("--role passive needs --listen HOST:PORT".into());
            }
            if connect.is_some() {
                problems.push("--connect is for --role active".into());
            }
            if key.is_some() || args.key_bits.is_some() {
                problems.push("the passive party holds no key; drop --key/--key-bits".into());
            }
        }
    }
    if args.role != Role::Local {
        if args.save.is_some() {
            problems.push("--save needs --role local; neither party alone holds the full model".into());
        }
        if baseline.is_some() {
            problems.push("--baseline needs --role local".into());
        }
    }
    if baseline.is_some() && (args.transcript.is_some() || args.record_noise.is_some()) {
        problems.push("--transcript and --record-noise apply to protocol runs, not --baseline".into());
    }

    match plan {
        Some(data) if problems.is_empty() => Ok(TrainPlan {
            role: args.role,
            data,
            hidden,
            bias: model.bias.unwrap_or(true),
            hp,
            eval_every: model.eval_every.unwrap_or(0),
            baseline,
            key,
            key_bits,
            noise_seed: args.noise_seed.or(proto.noise_seed),
            listen,
            connect,
            wait: Duration::from_secs_f64(wait.max(0.001)),
        }),
        _ => Err(CliError::Config(problems)),
    }
}
