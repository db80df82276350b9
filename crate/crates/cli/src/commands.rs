use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use serde_json::json;
use vsplit_core::harness::{
    bench_dimension_sweep, key_secrets, leakage_audit, load_csv, load_idx, serve_passive, train_active_remote, train_centralized, train_protocol,
    Arithmetic, Dataset, KeySource, ProtocolOptions, RunReport, SweepOptions, TrainedModel, TranscriptMode, TransportChoice,
};
use vsplit_core::nn::checkpoint;
use vsplit_core::phe::{read_private_key, write_private_key, write_public_key, MIN_KEY_BITS};
use vsplit_core::protocol::NoiseRecord;
use vsplit_core::transport::Transcript;

use crate::args::{AuditArgs, Baseline, BenchArgs, EvalArgs, KeygenArgs, Role, SplitChoice, TrainArgs};
use crate::config::{data_plan, train_plan, DataPlan, Source, TrainPlan, SECURE_KEY_BITS};
use crate::error::CliError;

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn stdout_line(line: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| CliError::io("<stdout>", e))
}

fn key_bits_problems(bits: u32) -> Vec<String> {
    if bits < MIN_KEY_BITS || bits % 2 != 0 {
        vec![format!("key size must be even and at least {MIN_KEY_BITS} bits, got {bits}")]
    } else {
        Vec::new()
    }
}

pub fn keygen(args: &KeygenArgs) -> Result<(), CliError> {
    let mut problems = key_bits_problems(args.bits);
    let (public, private) = (with_suffix(&args.out, ".pub"), with_suffix(&args.out, ".key"));
    if !args.force {
        for p in [&public, &private] {
            if p.exists() {
                problems.push(format!("{} exists; pass --force to overwrite", p.display()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    if args.bits < SECURE_KEY_BITS {
        eprintln!("warning: {}-bit keys are for testing only", args.bits);
    }
    let sk = KeySource::Generate { bits: args.bits, seed: args.seed }.resolve()?;
    write_public_key(&public, sk.public_key())?;
    write_private_key(&private, &sk)?;
    eprintln!("wrote {} and {}", public.display(), private.display());
    stdout_line(&json!({ "bits": sk.public_key().bits(), "public_key": public, "private_key": private }).to_string())
}

pub fn load_dataset(plan: &DataPlan) -> Result<Dataset, CliError> {
    let ds = match &plan.source {
        Source::Csv { path, opts } => load_csv(path, opts)?,
        Source::Idx { images, labels, limit, standardize } => {
            let mut ds = load_idx(images, labels, *limit, plan.split)?;
            if *standardize {
                ds.standardize_global();
            }
            if let Some(c) = plan.classes.filter(|&c| c != ds.classes) {
                return Err(CliError::Config(vec![format!("--classes {c} but the labels span {} classes", ds.classes)]));
            }
            ds
        }
    };
    Ok(ds)
}

fn write_noise(path: &Path, records: &[NoiseRecord]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("noise record serializes");
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_noise(path: &Path) -> Result<Vec<NoiseRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CliError::Config(vec![format!("{}:{}: {e}", path.display(), i + 1)]))?;
        out.push(rec);
    }
    Ok(out)
}

fn emit_report(report: &RunReport, path: Option<&Path>) -> Result<(), CliError> {
    let text = report.to_jsonl();
    if let Some(p) = path {
        std::fs::write(p, &text).map_err(|e| CliError::io(p, e))?;
    }
    print!("{text}");
    std::io::stdout().flush().map_err(|e| CliError::io("<stdout>", e))?;
    let m = &report.final_metrics;
    eprintln!(
        "{} on {}: test accuracy {:.4}, train accuracy {:.4}, {} steps in {:.1} s",
        report.kind, report.dataset, m.test_accuracy, m.train_accuracy, m.steps, report.timing.wall_seconds
    );
    Ok(())
}

fn protocol_options(plan: &TrainPlan, args: &TrainArgs) -> Result<ProtocolOptions, CliError> {
    let key = match &plan.key {
        Some(p) => KeySource::Provided(read_private_key(p)?),
        None => KeySource::Generate { bits: plan.key_bits, seed: None },
    };
    Ok(ProtocolOptions {
        noise_seed: plan.noise_seed,
        key,
        transport: TransportChoice::InProcess,
        rerandomize: true,
        crypto_seed: None,
        transcript: args.transcript.clone().map_or(TranscriptMode::Hash, TranscriptMode::File),
        record_noise: args.record_noise.is_some(),
    })
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let plan = train_plan(args)?;
    let ds = load_dataset(&plan.data)?;
    let opts = plan.options(ds.input_dim(), ds.classes);
    eprintln!("{}: {} rows ({} train / {} test), {} features, {} classes", ds.name, ds.len(), ds.train.len(), ds.test.len(), ds.input_dim(), ds.classes);

    if let Some(baseline) = plan.baseline {
        let arithmetic = match baseline {
            Baseline::Float => Arithmetic::Float,
            Baseline::Fixed => Arithmetic::Fixed,
        };
        let (model, report) = train_centralized(&ds, &opts, arithmetic)?;
        if let Some(p) = &args.save {
            match &model {
                TrainedModel::Float(m) => checkpoint::save(p, m)?,
                TrainedModel::Fixed(m) => checkpoint::save(p, m)?,
            }
        }
        return emit_report(&report, args.report.as_deref());
    }

    let proto = protocol_options(&plan, args)?;
    match plan.role {
        Role::Local => {
            let run = train_protocol(&ds, &opts, &proto)?;
            if let Some(p) = &args.save {
                checkpoint::save(p, &run.models.recovered()?)?;
            }
            if let Some(p) = &args.record_noise {
                write_noise(p, &run.noise)?;
            }
            emit_report(&run.report, args.report.as_deref())
        }
        Role::Active => {
            let addr = plan.connect.as_deref().expect("validated");
            eprintln!("connecting to {addr}");
            let run = train_active_remote(&ds, &opts, &proto, addr, plan.wait)?;
            if let Some(p) = &args.record_noise {
                write_noise(p, &run.noise)?;
            }
            emit_report(&run.report, args.report.as_deref())
        }
        Role::Passive => {
            let addr = plan.listen.as_deref().expect("validated");
            let listener = TcpListener::bind(addr).map_err(|e| CliError::io(addr, e))?;
            let local = listener.local_addr().map_err(|e| CliError::io(addr, e))?;
            eprintln!("listening on {local}");
            let run = serve_passive(&listener, &ds, &opts, &proto)?;
            if let Some(p) = &args.record_noise {
                write_noise(p, &run.noise)?;
            }
            let line = json!({ "kind": "protocol-passive", "dataset": ds.name, "seed": plan.hp.seed, "run": run }).to_string();
            if let Some(p) = &args.report {
                std::fs::write(p, format!("{line}\n")).map_err(|e| CliError::io(p, e))?;
            }
            eprintln!("session closed after {} scored predictions", run.predictions.len());
            stdout_line(&line)
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let plan = data_plan(&args.data, args.seed, &mut problems);
    let bytes = std::fs::read(&args.model).map_err(|e| CliError::io(&args.model, e))?;
    let model = match checkpoint::kind(&bytes)? {
        0 => TrainedModel::Float(checkpoint::decode(&bytes)?),
        _ => TrainedModel::Fixed(checkpoint::decode(&bytes)?),
    };
    let Some(plan) = plan.filter(|_| problems.is_empty()) else {
        return Err(CliError::Config(problems));
    };
    let ds = load_dataset(&plan)?;
    let (arithmetic, input_dim, classes) = match &model {
        TrainedModel::Float(m) => ("float", m.extractor.input_dim(), m.head.classes()),
        TrainedModel::Fixed(m) => ("fixed", m.extractor.input_dim(), m.head.classes()),
    };
    let mut problems = Vec::new();
    if input_dim != ds.input_dim() {
        problems.push(format!("model expects {input_dim} features, dataset has {}", ds.input_dim()));
    }
    if classes != ds.classes {
        problems.push(format!("model has {classes} classes, dataset has {}", ds.classes));
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let rows: Vec<usize> = match args.split {
        SplitChoice::Train => ds.train.clone(),
        SplitChoice::Test => ds.test.clone(),
        SplitChoice::All => (0..ds.len()).collect(),
    };
    let (loss, accuracy) = model.evaluate(&ds, &rows)?;
    eprintln!("{} ({arithmetic}) on {} rows of {}: accuracy {accuracy:.4}, loss {loss:.4}", args.model.display(), rows.len(), ds.name);
    let split = match args.split {
        SplitChoice::Train => "train",
        SplitChoice::Test => "test",
        SplitChoice::All => "all",
    };
    stdout_line(&json!({ "model": args.model, "arithmetic": arithmetic, "dataset": ds.name, "split": split, "rows": rows.len(), "loss": loss, "accuracy": accuracy }).to_string())
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let mut problems = Vec::new();
    if args.dims.is_empty() || args.dims.contains(&0) {
        problems.push(format!("--dims must be positive, got {:?}", args.dims));
    }
    if args.hidden == 0 || args.classes == 0 || args.trials == 0 {
        problems.push("--hidden, --classes and --trials must be positive".into());
    }
    if args.key.is_none() {
        problems.extend(key_bits_problems(args.key_bits));
        if args.key_bits < SECURE_KEY_BITS && !args.test_keys {
            problems.push(format!("--key-bits {} is below {SECURE_KEY_BITS}; add --test-keys to allow it", args.key_bits));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let key = match &args.key {
        Some(p) => KeySource::Provided(read_private_key(p)?),
        None => KeySource::Generate { bits: args.key_bits, seed: None },
    };
    let opts = SweepOptions { input_dims: args.dims.clone(), hidden_dim: args.hidden, classes: args.classes, trials: args.trials, frac_bits: args.frac_bits, seed: args.seed };
    let report = bench_dimension_sweep(&opts, &key)?;
    if let Some(p) = &args.gnuplot {
        std::fs::write(p, report.gnuplot_table()).map_err(|e| CliError::io(p, e))?;
    }
    for p in &report.points {
        eprintln!("d_i {:>6}: protocol {:.4} s, encrypted MLR {:.4} s", p.input_dim, p.protocol_seconds, p.mlr_seconds);
    }
    eprintln!("protocol spread {:.3}, MLR growth {:.1}x", report.protocol_spread(), report.mlr_growth());
    print!("{}", report.to_jsonl());
    std::io::stdout().flush().map_err(|e| CliError::io("<stdout>", e))
}

pub fn audit(args: &AuditArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.transcript).map_err(|e| CliError::io(&args.transcript, e))?;
    let frames = Transcript::from_bytes(bytes).frames()?;
    let sk = read_private_key(&args.key)?;
    let mut records = Vec::new();
    for p in &args.noise {
        records.extend(read_noise(p)?);
    }
    let noise = (!args.noise.is_empty()).then_some(records.as_slice());
    let report = leakage_audit(&frames, &key_secrets(&sk), noise)?;
    stdout_line(&serde_json::to_string(&report).expect("audit report serializes"))?;
    if !report.blinding_verified {
        eprintln!("blinding not verified: pass --noise for both parties' records");
    }
    if report.passed() {
        eprintln!("audit passed: {} frames, {} crossing tensors checked", report.frames, report.crossing);
        Ok(())
    } else {
        Err(CliError::Audit { frames: report.offending_frames() })
    }
}
