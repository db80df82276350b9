use std::collections::HashMap;
use std::net::TcpListener;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::report::{EpochReport, FinalMetrics, PhaseSeconds, RunReport, Timing, TranscriptInfo};
use super::HarnessError;
use crate::codec::{OpCounts, DEFAULT_OPERAND_BITS};
use crate::nn::{
    encode_inputs, seeded_rng, softmax_xent, Architecture, Arith, CentralModel, FeatureExtractor, Fixed, Float, Head, Hyperparams, Tensor,
    STREAM_SHUFFLE,
};
use crate::phe::{keygen, PrivateKey, PublicKey};
use crate::protocol::{
    run_passive, ActiveParty, LocalSession, Metrics, Mode, NoiseConfig, NoiseRecord, PassiveParty, PhaseTimes, ProtocolError,
    RemoteSession, Session, SessionConfig, PROTOCOL_VERSION,
};
use crate::transport::{Recording, TcpChannel, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arithmetic {
    Float,
    Fixed,
}

/// Shared training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub arch: Architecture,
    pub hp: Hyperparams,
    /// Evaluate on the test split every this many epochs; the last epoch is
    /// always evaluated. Zero means the last epoch only.
    pub eval_every: usize,
}

impl TrainOptions {
    fn evaluates(&self, epoch: usize) -> bool {
        epoch + 1 == self.hp.epochs || (self.eval_every > 0 && (epoch + 1) % self.eval_every == 0)
    }

    fn snapshot(&self, ds: &Dataset, extra: serde_json::Value) -> serde_json::Value {
        let mut v = serde_json::json!({
            "arch": self.arch,
            "hyperparams": self.hp,
            "eval_every": self.eval_every,
            "train_rows": ds.train.len(),
            "test_rows": ds.test.len(),
            "input_dim": ds.input_dim(),
            "classes": ds.classes,
        });
        if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
            obj.extend(more);
        }
        v
    }
}

/// A trained centralized model in either arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Float(CentralModel<Float>),
    Fixed(CentralModel<Fixed>),
}

impl TrainedModel {
    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>, HarnessError> {
        Ok(match self {
            TrainedModel::Float(m) => m.predict(&encode_inputs(m.arith(), x)?)?,
            TrainedModel::Fixed(m) => m.predict(&encode_inputs(m.arith(), x)?)?,
        })
    }

    /// `(mean loss, accuracy)` on the given rows.
    pub fn evaluate(&self, ds: &Dataset, idx: &[usize]) -> Result<(f64, f64), HarnessError> {
        match self {
            TrainedModel::Float(m) => evaluate(m, ds, idx),
            TrainedModel::Fixed(m) => evaluate(m, ds, idx),
        }
    }
}

fn evaluate<A: Arith>(m: &CentralModel<A>, ds: &Dataset, idx: &[usize]) -> Result<(f64, f64), HarnessError> {
    if idx.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let x = encode_inputs(m.arith(), &ds.rows(chunk))?;
        let (_, _, z) = m.logits(&x)?;
        let (sum, _, _) = softmax_xent(m.arith(), &z, &ds.one_hot(chunk))?;
        loss += sum;
        let preds = crate::nn::argmax_rows(m.arith(), &z);
        correct += chunk.iter().zip(&preds).filter(|(&i, &p)| ds.labels[i] == p).count();
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// The mini-batch schedule shared by every trainer: the training rows are
/// reshuffled each epoch from one seeded stream.
pub fn batch_schedule(ds: &Dataset, hp: &Hyperparams) -> impl Iterator<Item = (usize, Vec<Vec<usize>>)> {
    let mut rng = seeded_rng(hp.seed, STREAM_SHUFFLE);
    let train = ds.train.clone();
    let (epochs, b) = (hp.epochs, hp.batch_size.max(1));
    (0..epochs).map(move |e| {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        (e, order.chunks(b).map(|c| c.to_vec()).collect())
    })
}

fn check_shapes(ds: &Dataset, opts: &TrainOptions) -> Result<(), HarnessError> {
    let mut problems = opts.hp.problems();
    if let Err(e) = opts.arch.validate() {
        problems.push(e.to_string());
    }
    if opts.arch.input_dim != ds.input_dim() {
        problems.push(format!("architecture expects {} inputs, dataset has {}", opts.arch.input_dim, ds.input_dim()));
    }
    if opts.arch.classes != ds.classes {
        problems.push(format!("architecture has {} classes, dataset has {}", opts.arch.classes, ds.classes));
    }
    if ds.train.is_empty() {
        problems.push("training split is empty".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Config(problems.join("; ")))
    }
}

/// Plain SGD on one machine. `Fixed` performs every step on the same
/// integer grid as the protocol and is its bit-exact reference.
pub fn train_centralized(ds: &Dataset, opts: &TrainOptions, arithmetic: Arithmetic) -> Result<(TrainedModel, RunReport), HarnessError> {
    check_shapes(ds, opts)?;
    let start = Instant::now();
    let (model, epochs, steps) = match arithmetic {
        Arithmetic::Float => {
            let (m, e, t) = central_loop(Float, ds, opts)?;
            (TrainedModel::Float(m), e, t)
        }
        Arithmetic::Fixed => {
            let (m, e, t) = central_loop(Fixed::new(opts.hp.frac_bits)?, ds, opts)?;
            (TrainedModel::Fixed(m), e, t)
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let kind = match arithmetic {
        Arithmetic::Float => "centralized-float",
        Arithmetic::Fixed => "centralized-fixed",
    };
    let report = RunReport {
        kind: kind.into(),
        dataset: ds.name.clone(),
        seed: opts.hp.seed,
        config: opts.snapshot(ds, serde_json::json!({ "arithmetic": arithmetic })),
        final_metrics: final_metrics(&epochs, steps),
        epochs,
        ops: None,
        timing: Timing { phases: PhaseSeconds { plaintext: wall, ..PhaseSeconds::default() }, wall_seconds: wall },
        transcript: None,
    };
    Ok((model, report))
}

fn central_loop<A: Arith>(arith: A, ds: &Dataset, opts: &TrainOptions) -> Result<(CentralModel<A>, Vec<EpochReport>, u64), HarnessError> {
    let hp = &opts.hp;
    let mut model = CentralModel::init(arith.clone(), &opts.arch, hp.seed)?;
    let lr = arith.from_real(hp.lr, 1)?;
    let mut reports = Vec::new();
    let mut step = 0u64;
    for (epoch, batches) in batch_schedule(ds, hp) {
        let mut m = Metrics::default();
        for idx in batches {
            let x = encode_inputs(&arith, &ds.rows(&idx))?;
            let (loss, preds) =
                model.train_batch_scored(&x, &ds.one_hot(&idx), lr).map_err(|e| HarnessError::Diverged { step, reason: e.to_string() })?;
            m.loss_sum += loss;
            m.correct += idx.iter().zip(&preds).filter(|(&i, &p)| ds.labels[i] == p).count() as u64;
            m.count += idx.len() as u64;
            step += 1;
        }
        let (test_loss, test_accuracy) = if opts.evaluates(epoch) {
            let (l, a) = evaluate(&model, ds, &ds.test)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        reports.push(EpochReport { epoch: epoch as u32, train_loss: m.mean_loss(), train_accuracy: m.accuracy(), test_loss, test_accuracy });
    }
    Ok((model, reports, step))
}

fn final_metrics(epochs: &[EpochReport], steps: u64) -> FinalMetrics {
    let last_test = epochs.iter().rev().find(|e| e.test_accuracy.is_some());
    FinalMetrics {
        train_accuracy: epochs.last().map_or(0.0, |e| e.train_accuracy),
        test_loss: last_test.and_then(|e| e.test_loss).unwrap_or(0.0),
        test_accuracy: last_test.and_then(|e| e.test_accuracy).unwrap_or(0.0),
        steps,
    }
}

/// Where the Paillier key comes from.
#[derive(Debug, Clone)]
pub enum KeySource {
    Generate { bits: u32, seed: Option<u64> },
    Provided(PrivateKey),
}

impl KeySource {
    pub fn resolve(&self) -> Result<PrivateKey, HarnessError> {
        match self {
            KeySource::Provided(k) => Ok(k.clone()),
            KeySource::Generate { bits, seed } => {
                let mut rng = match seed {
                    Some(s) => seeded_rng(*s, 20),
                    None => ChaCha20Rng::from_entropy(),
                };
                Ok(keygen(*bits, &mut rng)?.1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportChoice {
    /// Both parties in this thread over the in-memory channel.
    InProcess,
    /// Label holder on a background thread behind a loopback TCP socket.
    LoopbackTcp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptMode {
    /// Digest only.
    Hash,
    /// Keep every frame in memory (small runs and audits).
    Memory,
    /// Stream frames to a file.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// Seed for both parties' noise streams (bounds come from the
    /// hyperparameters); `None` draws from the OS.
    pub noise_seed: Option<u64>,
    pub key: KeySource,
    pub transport: TransportChoice,
    pub rerandomize: bool,
    /// Seed for encryption randomness; `None` draws from the OS.
    pub crypto_seed: Option<u64>,
    pub transcript: TranscriptMode,
    /// Keep every noise draw from both parties (for audits).
    pub record_noise: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            noise_seed: None,
            key: KeySource::Generate { bits: 2048, seed: None },
            transport: TransportChoice::InProcess,
            rerandomize: true,
            crypto_seed: None,
            transcript: TranscriptMode::Hash,
            record_noise: false,
        }
    }
}

/// What each party ends up holding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolModels {
    pub extractor: FeatureExtractor<Fixed>,
    /// `W̃2` at scale 2f (label holder).
    pub noisy_head: Tensor<i128>,
    /// `ε_acc` at scale 2f (key holder).
    pub ledger: Tensor<i128>,
}

impl ProtocolModels {
    /// `W2 = W̃2 - ε_acc`, joined with the extractor into one model.
    pub fn recovered(&self) -> Result<CentralModel<Fixed>, HarnessError> {
        let w = self.noisy_head.data().iter().zip(self.ledger.data()).map(|(&a, &b)| crate::fixed::sub(a, b)).collect::<Result<Vec<_>, _>>()?;
        let head = Head { w: Tensor::new(self.noisy_head.dims().to_vec(), w)? };
        Ok(CentralModel::from_parts(*self.extractor.arith(), self.extractor.clone(), head)?)
    }
}

pub struct ProtocolRun {
    pub models: ProtocolModels,
    pub report: RunReport,
    pub transcript: Transcript,
    /// Noise draws from both parties, when recording was requested.
    pub noise: Vec<NoiseRecord>,
    pub predictions: Vec<(u64, usize)>,
    pub private_key: PrivateKey,
}

fn labels_of(ds: &Dataset) -> HashMap<u64, usize> {
    ds.labels.iter().enumerate().map(|(i, &l)| (i as u64, l)).collect()
}

fn ids(idx: &[usize]) -> Vec<u64> {
    idx.iter().map(|&i| i as u64).collect()
}

/// The handshake configuration both parties derive from the same settings.
pub fn session_config(opts: &TrainOptions, proto: &ProtocolOptions) -> SessionConfig {
    SessionConfig {
        version: PROTOCOL_VERSION,
        frac_bits: opts.hp.frac_bits,
        operand_bits: DEFAULT_OPERAND_BITS,
        lr: opts.hp.lr,
        hidden_dim: opts.arch.hidden_dim() as u32,
        classes: opts.arch.classes as u32,
        batch_size: opts.hp.batch_size as u32,
        noise_blind: opts.hp.noise.blind,
        noise_weight: opts.hp.noise.weight,
        rerandomize: proto.rerandomize,
    }
}

fn crypto_seed(proto: &ProtocolOptions, stream: u64) -> Option<u64> {
    proto.crypto_seed.map(|s| s.wrapping_mul(31).wrapping_add(stream))
}

fn noise_config(opts: &TrainOptions, proto: &ProtocolOptions) -> Result<NoiseConfig, HarnessError> {
    let noise = NoiseConfig { bounds: opts.hp.noise, seed: proto.noise_seed };
    let problems = noise.problems();
    if problems.is_empty() {
        Ok(noise)
    } else {
        Err(HarnessError::Config(problems.join("; ")))
    }
}

fn open_transcript(mode: &TranscriptMode) -> Result<Transcript, HarnessError> {
    Ok(match mode {
        TranscriptMode::Hash => Transcript::hashing(),
        TranscriptMode::Memory => Transcript::new(),
        TranscriptMode::File(p) => Transcript::to_file(p).map_err(|e| HarnessError::io(p, e))?,
    })
}

fn build_active(ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions) -> Result<(PrivateKey, ActiveParty), HarnessError> {
    check_shapes(ds, opts)?;
    let noise = noise_config(opts, proto)?;
    let sk = proto.key.resolve()?;
    let active = ActiveParty::new(sk.clone(), &opts.arch, &opts.hp, noise, crypto_seed(proto, 1))?
        .with_rerandomize(proto.rerandomize)
        .with_noise_recording(proto.record_noise);
    Ok((sk, active))
}

fn passive_builder(ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions) -> impl FnOnce(PublicKey) -> Result<PassiveParty, ProtocolError> {
    let config = session_config(opts, proto);
    let labels = labels_of(ds);
    let (seed, noise_seed, record, crypto) = (opts.hp.seed, proto.noise_seed, proto.record_noise, crypto_seed(proto, 2));
    move |pk| PassiveParty::new(pk, &config, seed, noise_seed, crypto, labels).map(|p| p.with_noise_recording(record))
}

struct Finished {
    epochs: Vec<EpochReport>,
    steps: u64,
    ops: OpCounts,
    times: PhaseTimes,
    key_bits: u64,
    transport: &'static str,
}

fn protocol_report(ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions, f: Finished, start: Instant, transcript: &Transcript) -> RunReport {
    RunReport {
        kind: "protocol".into(),
        dataset: ds.name.clone(),
        seed: opts.hp.seed,
        config: opts.snapshot(
            ds,
            serde_json::json!({
                "key_bits": f.key_bits,
                "rerandomize": proto.rerandomize,
                "transport": f.transport,
            }),
        ),
        final_metrics: final_metrics(&f.epochs, f.steps),
        epochs: f.epochs,
        ops: Some(f.ops),
        timing: Timing { phases: f.times.into(), wall_seconds: start.elapsed().as_secs_f64() },
        transcript: Some(TranscriptInfo { sha256: transcript.sha256_hex(), bytes: transcript.len(), frames: transcript.frame_count() }),
    }
}

fn flush(transcript: &Transcript) -> Result<(), HarnessError> {
    transcript.flush().map_err(|e| HarnessError::io("transcript", e))
}

/// Runs the two-party protocol end to end and scores it on the test split.
pub fn train_protocol(ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions) -> Result<ProtocolRun, HarnessError> {
    let start = Instant::now();
    let (sk, active) = build_active(ds, opts, proto)?;
    let pk = sk.public_key().clone();
    let transcript = open_transcript(&proto.transcript)?;
    let build_passive = passive_builder(ds, opts, proto);

    let (active, passive, epochs, steps, times) = match proto.transport {
        TransportChoice::InProcess => {
            let passive = build_passive(pk.clone())?;
            let mut session = LocalSession::with_transcript(active, passive, transcript.clone())?;
            let (epochs, steps) = drive(&mut session, ds, opts)?;
            let times = session.times().merged(session.passive().times());
            let (a, p) = session.into_parties();
            (a, p, epochs, steps, times)
        }
        TransportChoice::LoopbackTcp => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| HarnessError::io("127.0.0.1:0", e))?;
            let addr = listener.local_addr().map_err(|e| HarnessError::io("127.0.0.1:0", e))?;
            let config = session_config(opts, proto);
            let server = thread::spawn(move || -> Result<PassiveParty, ProtocolError> {
                let mut ch = TcpChannel::accept(&listener)?;
                run_passive(&mut ch, &config, build_passive)
            });
            let ch = Recording::new(TcpChannel::connect(addr, Duration::from_secs(10))?, transcript.clone());
            let mut session = RemoteSession::connect(active, ch)?;
            let outcome = drive(&mut session, ds, opts);
            // Always release the peer, even after a failure.
            let _ = session.shutdown();
            let times = session.times();
            let (a, _) = session.into_parts();
            let passive = server.join().map_err(|_| HarnessError::Config("label holder thread panicked".into()))??;
            let (epochs, steps) = outcome?;
            (a, passive, epochs, steps, times)
        }
    };
    flush(&transcript)?;

    let mut records = active.noise_records().to_vec();
    records.extend_from_slice(passive.noise_records());
    let models = ProtocolModels { extractor: active.extractor().clone(), noisy_head: passive.noisy_weights(), ledger: active.ledger() };
    let finished = Finished {
        epochs,
        steps,
        ops: active.evaluator().counts() + passive.evaluator().counts(),
        times,
        key_bits: pk.bits(),
        transport: match proto.transport {
            TransportChoice::InProcess => "in-process",
            TransportChoice::LoopbackTcp => "tcp",
        },
    };
    let report = protocol_report(ds, opts, proto, finished, start, &transcript);
    let predictions = passive.predictions().to_vec();
    Ok(ProtocolRun { models, report, transcript, noise: records, predictions, private_key: sk })
}

/// What the key holder keeps after a two-process run.
pub struct ActiveRun {
    pub report: RunReport,
    pub extractor: FeatureExtractor<Fixed>,
    pub ledger: Tensor<i128>,
    pub transcript: Transcript,
    pub noise: Vec<NoiseRecord>,
}

/// Key holder of a two-process run: connects to the label holder at `addr`,
/// trains, evaluates and shuts the session down. Phase times include time
/// spent waiting on the peer under transport.
pub fn train_active_remote(ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions, addr: &str, wait: Duration) -> Result<ActiveRun, HarnessError> {
    let start = Instant::now();
    let (sk, active) = build_active(ds, opts, proto)?;
    let transcript = open_transcript(&proto.transcript)?;
    let ch = Recording::new(TcpChannel::connect(addr, wait)?, transcript.clone());
    let mut session = RemoteSession::connect(active, ch)?;
    let outcome = drive(&mut session, ds, opts);
    let closed = session.shutdown();
    let (epochs, steps) = outcome?;
    closed?;
    flush(&transcript)?;
    let times = session.times();
    let (active, _) = session.into_parts();
    let finished = Finished { epochs, steps, ops: active.evaluator().counts(), times, key_bits: sk.public_key().bits(), transport: "tcp" };
    let report = protocol_report(ds, opts, proto, finished, start, &transcript);
    Ok(ActiveRun { report, extractor: active.extractor().clone(), ledger: active.ledger(), transcript, noise: active.noise_records().to_vec() })
}

/// What the label holder keeps after a two-process run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassiveRun {
    #[serde(skip)]
    pub noisy_head: Tensor<i128>,
    pub predictions: Vec<(u64, usize)>,
    pub ops: OpCounts,
    pub phases: PhaseSeconds,
    #[serde(skip)]
    pub noise: Vec<NoiseRecord>,
}

/// Label holder of a two-process run: accepts one key holder on `listener`
/// and answers it until it shuts the session down. Only the labels of `ds`
/// are used.
pub fn serve_passive(listener: &TcpListener, ds: &Dataset, opts: &TrainOptions, proto: &ProtocolOptions) -> Result<PassiveRun, HarnessError> {
    opts.arch.validate()?;
    noise_config(opts, proto)?;
    if opts.arch.classes != ds.classes {
        return Err(HarnessError::Config(format!("architecture has {} classes, dataset has {}", opts.arch.classes, ds.classes)));
    }
    let mut ch = TcpChannel::accept(listener)?;
    let passive = run_passive(&mut ch, &session_config(opts, proto), passive_builder(ds, opts, proto))?;
    Ok(PassiveRun {
        noisy_head: passive.noisy_weights(),
        predictions: passive.predictions().to_vec(),
        ops: passive.evaluator().counts(),
        phases: (*passive.times()).into(),
        noise: passive.noise_records().to_vec(),
    })
}

/// The epoch loop over any session.
pub fn drive<S: Session>(session: &mut S, ds: &Dataset, opts: &TrainOptions) -> Result<(Vec<EpochReport>, u64), HarnessError> {
    let mut reports = Vec::new();
    let mut step = 0u64;
    for (epoch, batches) in batch_schedule(ds, &opts.hp) {
        for idx in batches {
            session
                .train_step(&ids(&idx), &ds.rows(&idx))
                .map_err(|e| HarnessError::Step { step, tag: session.last_tag().map_or("none", |t| t.name()), source: e })?;
            step += 1;
        }
        let m = session.end_phase(epoch as u32, Mode::Train)?;
        let (test_loss, test_accuracy) = if opts.evaluates(epoch) {
            let t = evaluate_protocol(session, ds, &ds.test, epoch as u32, opts.hp.batch_size)?;
            (Some(t.mean_loss()), Some(t.accuracy()))
        } else {
            (None, None)
        };
        reports.push(EpochReport { epoch: epoch as u32, train_loss: m.mean_loss(), train_accuracy: m.accuracy(), test_loss, test_accuracy });
    }
    Ok((reports, step))
}

/// Encrypted inference over `idx`; the label holder scores it.
pub fn evaluate_protocol<S: Session>(session: &mut S, ds: &Dataset, idx: &[usize], epoch: u32, batch: usize) -> Result<Metrics, HarnessError> {
    for chunk in idx.chunks(batch.max(1)) {
        session.infer(&ids(chunk), &ds.rows(chunk))?;
    }
    Ok(session.end_phase(epoch, Mode::Infer)?)
}
