use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::synthetic;
use super::report::{PhaseSeconds, SweepPoint, SweepReport};
use super::train::KeySource;
use super::HarnessError;
use crate::codec::{Evaluator, OpCounts, PlainTensor};
use crate::nn::{seeded_rng, Architecture, Hyperparams, NoiseBounds, Tensor};
use crate::par;
use crate::phe::PrivateKey;
use crate::protocol::{
    grid_noise, ActiveParty, Body, DecodeContext, LocalSession, Mode, NoiseConfig, PassiveParty, PhaseTimes, ProtocolMessage, Session, Tag,
};

const STREAM_SWEEP: u64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub input_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub classes: usize,
    pub trials: usize,
    pub frac_bits: u32,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { input_dims: vec![32, 320, 3072], hidden_dim: 84, classes: 10, trials: 5, frac_bits: 16, seed: 0 }
    }
}

fn fastest(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn parties(sk: &PrivateKey, arch: &Architecture, hp: &Hyperparams, seed: u64, labels: HashMap<u64, usize>) -> Result<(ActiveParty, PassiveParty), HarnessError> {
    let noise = NoiseConfig::seeded(hp.noise, seed);
    let active = ActiveParty::new(sk.clone(), arch, hp, noise, Some(seed))?;
    let passive = PassiveParty::new(sk.public_key().clone(), &active.session_config(), hp.seed, Some(seed), Some(seed), labels)?;
    Ok((active, passive))
}

fn setup(opts: &SweepOptions, d_i: usize) -> (Architecture, Hyperparams) {
    let arch = Architecture { input_dim: d_i, hidden: vec![opts.hidden_dim], classes: opts.classes, bias: false };
    let hp = Hyperparams { lr: 0.05, batch_size: 1, epochs: 1, seed: opts.seed, frac_bits: opts.frac_bits, noise: NoiseBounds::default() };
    (arch, hp)
}

/// Per-inference cost of the protocol against a classifier applied directly
/// to encrypted raw features, for each input width. Runs sequentially, with
/// the widths interleaved inside every trial so machine-wide slowdowns hit
/// all of them alike.
pub fn bench_dimension_sweep(opts: &SweepOptions, key: &KeySource) -> Result<SweepReport, HarnessError> {
    if opts.input_dims.is_empty() || opts.trials == 0 || opts.hidden_dim == 0 || opts.classes < 2 {
        return Err(HarnessError::Config("sweep needs input widths, at least one trial, a hidden width and 2 classes".into()));
    }
    let sk = key.resolve()?;
    par::with_mode(par::Mode::Sequential, || {
        let mut lanes = opts.input_dims.iter().map(|&d_i| Lane::new(opts, &sk, d_i)).collect::<Result<Vec<_>, _>>()?;
        for t in 0..opts.trials {
            for lane in &mut lanes {
                lane.trial(t, &sk)?;
            }
        }
        let points = lanes.into_iter().map(|l| l.finish(&sk)).collect::<Result<Vec<_>, _>>()?;
        Ok(SweepReport { hidden_dim: opts.hidden_dim, classes: opts.classes, key_bits: sk.public_key().bits(), trials: opts.trials, points })
    })
}

struct Lane {
    d_i: usize,
    arch: Architecture,
    hp: Hyperparams,
    x: Tensor<f64>,
    session: LocalSession,
    mlr: Mlr,
    walls: Vec<f64>,
    mlr_walls: Vec<f64>,
    ops_before: OpCounts,
    times_before: PhaseTimes,
}

impl Lane {
    fn new(opts: &SweepOptions, sk: &PrivateKey, d_i: usize) -> Result<Self, HarnessError> {
        let (arch, hp) = setup(opts, d_i);
        let x = synthetic(opts.trials, d_i, opts.classes, opts.seed.wrapping_add(d_i as u64)).x;
        let (active, passive) = parties(sk, &arch, &hp, opts.seed, HashMap::new())?;
        let mut session = LocalSession::new(active, passive)?;
        let mut mlr = Mlr::new(opts, sk, d_i)?;
        // One untimed pass of each to warm caches and the allocator.
        let first = x.gather_rows(&[0]);
        session.infer(&[u64::MAX], &first)?;
        mlr.infer(sk, u64::MAX, first.row(0))?;
        let (ops_before, times_before) = (combined_ops(&session), session_times(&session));
        mlr.ops_before = mlr.eval.counts();
        Ok(Self { d_i, arch, hp, x, session, mlr, walls: Vec::new(), mlr_walls: Vec::new(), ops_before, times_before })
    }

    fn trial(&mut self, t: usize, sk: &PrivateKey) -> Result<(), HarnessError> {
        let row = self.x.gather_rows(&[t]);
        let start = Instant::now();
        self.session.infer(&[t as u64], &row)?;
        self.walls.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        self.mlr.infer(sk, t as u64, row.row(0))?;
        self.mlr_walls.push(start.elapsed().as_secs_f64());
        Ok(())
    }

    fn finish(self, sk: &PrivateKey) -> Result<SweepPoint, HarnessError> {
        let trials = self.walls.len();
        let phases = diff(&session_times(&self.session), &self.times_before);
        let mut ps = PhaseSeconds::from(phases);
        for v in [&mut ps.encrypt, &mut ps.homomorphic, &mut ps.decrypt, &mut ps.plaintext, &mut ps.transport] {
            *v /= trials as f64;
        }
        let train_step = train_step_ops(sk, &self.arch, &self.hp, &self.x.gather_rows(&[0]))?;
        Ok(SweepPoint {
            input_dim: self.d_i,
            protocol_seconds: fastest(&self.walls),
            mlr_seconds: fastest(&self.mlr_walls),
            protocol_median_seconds: median(self.walls),
            mlr_median_seconds: median(self.mlr_walls),
            protocol_phases: ps,
            protocol_ops: per_trial(combined_ops(&self.session) - self.ops_before, trials),
            mlr_ops: per_trial(self.mlr.eval.counts() - self.mlr.ops_before, trials),
            train_step_ops: train_step.iter().fold(OpCounts::default(), |acc, s| acc + s.ops),
        })
    }
}

fn combined_ops(s: &LocalSession) -> OpCounts {
    s.active().evaluator().counts() + s.passive().evaluator().counts()
}

fn session_times(s: &LocalSession) -> PhaseTimes {
    s.times().merged(s.passive().times())
}

fn diff(a: &PhaseTimes, b: &PhaseTimes) -> PhaseTimes {
    let d = |x: Duration, y: Duration| x.saturating_sub(y);
    PhaseTimes {
        encrypt: d(a.encrypt, b.encrypt),
        homomorphic: d(a.homomorphic, b.homomorphic),
        decrypt: d(a.decrypt, b.decrypt),
        plaintext: d(a.plaintext, b.plaintext),
        transport: d(a.transport, b.transport),
    }
}

fn per_trial(c: OpCounts, trials: usize) -> OpCounts {
    let t = trials.max(1) as u64;
    OpCounts {
        encrypt: c.encrypt / t,
        decrypt: c.decrypt / t,
        add_cipher: c.add_cipher / t,
        add_plain: c.add_plain / t,
        mul_plain: c.mul_plain / t,
        rerandomize: c.rerandomize / t,
    }
}

/// Encrypted multinomial logistic regression: the feature holder encrypts the
/// raw features, the label holder applies its `c × d_i` weights, blinds and
/// returns the logits, and the feature holder decrypts. Both messages go
/// through the wire codec.
struct Mlr {
    eval: Evaluator,
    ctx: DecodeContext,
    w: PlainTensor,
    rng: rand_chacha::ChaCha20Rng,
    frac_bits: u32,
    classes: usize,
    ops_before: OpCounts,
}

impl Mlr {
    fn new(opts: &SweepOptions, sk: &PrivateKey, d_i: usize) -> Result<Self, HarnessError> {
        let pk = sk.public_key().clone();
        let f = opts.frac_bits;
        let eval = Evaluator::new(pk.clone(), f)?;
        let ctx = DecodeContext { public_key: Some(pk), operand_bits: crate::codec::DEFAULT_OPERAND_BITS };
        let mut rng = seeded_rng(opts.seed, STREAM_SWEEP);
        let w: Vec<i128> = (0..opts.classes * d_i).map(|_| rng.gen_range(-(1i128 << f)..=(1i128 << f))).collect();
        let w = PlainTensor::new(vec![opts.classes, d_i], f, w)?;
        Ok(Self { eval, ctx, w, rng, frac_bits: f, classes: opts.classes, ops_before: OpCounts::default() })
    }

    fn infer(&mut self, sk: &PrivateKey, id: u64, x: &[f64]) -> Result<(), HarnessError> {
        let f = self.frac_bits;
        let plain = PlainTensor::encode(vec![x.len()], f, x)?;
        let enc = self.eval.encrypt(&plain, &mut self.rng)?;
        let msg = roundtrip(ProtocolMessage::new(id, 0, Body::EncActivation { mode: Mode::Infer, sample_ids: vec![id], acts: enc }), &self.ctx)?;
        let Body::EncActivation { acts, .. } = msg.body else { unreachable!("round trip preserves the body") };
        let sums = self.eval.matvec(&self.w, &acts)?;
        let noise = grid_noise(&mut self.rng, NoiseBounds::DEFAULT_BLIND, 2 * f, vec![self.classes])?;
        let sums = self.eval.rerandomize(&self.eval.add_plain(&sums, &noise)?, &mut self.rng);
        let msg = roundtrip(ProtocolMessage::new(id, 0, Body::NoisyWsum { sums }), &self.ctx)?;
        let Body::NoisyWsum { sums } = msg.body else { unreachable!("round trip preserves the body") };
        std::hint::black_box(self.eval.decrypt(sk, &sums)?);
        Ok(())
    }
}

fn roundtrip(msg: ProtocolMessage, ctx: &DecodeContext) -> Result<ProtocolMessage, HarnessError> {
    let bytes = msg.encode_payload();
    ProtocolMessage::decode(msg.tag() as u8, &bytes, ctx).map_err(|e| HarnessError::Format(e.to_string()))
}

/// Ops spent by one handler during a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerOps {
    /// `true` for the label holder.
    pub passive: bool,
    /// Message handled; `None` for the forward pass that opens the step.
    pub handled: Option<Tag>,
    pub ops: OpCounts,
}

/// Drives one training batch through freshly built parties by hand and
/// attributes every Paillier op to the handler that spent it.
pub fn train_step_ops(sk: &PrivateKey, arch: &Architecture, hp: &Hyperparams, x: &Tensor<f64>) -> Result<Vec<HandlerOps>, HarnessError> {
    let labels = (0..x.rows() as u64).map(|i| (i, (i as usize) % arch.classes)).collect();
    let (mut active, mut passive) = parties(sk, arch, hp, hp.seed, labels)?;
    let ids: Vec<u64> = (0..x.rows() as u64).collect();
    let mut out = Vec::new();
    let before = active.evaluator().counts();
    let mut msg = active.forward(1, 0, &ids, x, Mode::Train)?;
    out.push(HandlerOps { passive: false, handled: None, ops: active.evaluator().counts() - before });
    let mut from_active = true;
    loop {
        let tag = msg.tag();
        let (reply, ops) = if from_active {
            let before = passive.evaluator().counts();
            let r = passive.handle(&msg)?;
            (r, passive.evaluator().counts() - before)
        } else {
            let before = active.evaluator().counts();
            let r = active.handle(&msg)?;
            (r, active.evaluator().counts() - before)
        };
        out.push(HandlerOps { passive: from_active, handled: Some(tag), ops });
        match reply {
            Some(m) => {
                msg = m;
                from_active = !from_active;
            }
            None => break,
        }
    }
    Ok(out)
}
