use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::message::{Body, Mode, ProtocolMessage, SessionConfig, PROTOCOL_VERSION};
use super::{
    expect_dims, expect_scale, grid_noise, rng_from, NoiseConfig, NoiseKind, NoiseRecord, Phase, PhaseTimes, ProtocolError, LEDGER_BITS,
    STREAM_ACTIVE_CRYPTO, STREAM_ACTIVE_NOISE,
};
use crate::codec::{CodecError, Evaluator, FixedScale, PlainTensor, DEFAULT_OPERAND_BITS};
use crate::fixed;
use crate::nn::{encode_inputs, seeded_rng, Architecture, Arith, FeatureExtractor, Fixed, ForwardCache, Hyperparams, Tensor, STREAM_EXTRACTOR};
use crate::phe::PrivateKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    AwaitSum,
    AwaitWeightGrad,
    AwaitActGrad,
}

#[derive(Debug, Clone)]
struct InFlight {
    mode: Mode,
    stage: Stage,
    step: u32,
    acts: Tensor<i128>,
    cache: ForwardCache<i128>,
}

/// Feature holder: key pair, feature extractor and the accumulated weight
/// noise `ε_acc` (held at scale 2f).
#[derive(Debug, Clone)]
pub struct ActiveParty {
    sk: PrivateKey,
    eval: Evaluator,
    arith: Fixed,
    extractor: FeatureExtractor<Fixed>,
    ledger: Vec<i128>,
    classes: usize,
    hidden: usize,
    lr: i128,
    lr_real: f64,
    noise: NoiseConfig,
    batch_size: usize,
    rerandomize: bool,
    noise_rng: ChaCha20Rng,
    crypto_rng: ChaCha20Rng,
    inflight: BTreeMap<u64, InFlight>,
    times: PhaseTimes,
    record: bool,
    records: Vec<NoiseRecord>,
}

impl ActiveParty {
    /// The extractor is initialized from `hp.seed` exactly as the centralized
    /// trainer initializes it.
    pub fn new(sk: PrivateKey, arch: &Architecture, hp: &Hyperparams, noise: NoiseConfig, crypto_seed: Option<u64>) -> Result<Self, ProtocolError> {
        arch.validate()?;
        hp.validate()?;
        let problems = noise.problems();
        if !problems.is_empty() {
            return Err(ProtocolError::Config(problems.join("; ")));
        }
        let arith = Fixed::new(hp.frac_bits)?;
        let pk = sk.public_key().clone();
        let fs = FixedScale::for_key(hp.frac_bits, &pk)?.with_operand_bits(DEFAULT_OPERAND_BITS);
        let eval = Evaluator::with_scale(pk, fs);
        let extractor = FeatureExtractor::init(arith, &arch.widths(), arch.bias, &mut seeded_rng(hp.seed, STREAM_EXTRACTOR))?;
        let (classes, hidden) = (arch.classes, arch.hidden_dim());
        Ok(Self {
            sk,
            eval,
            arith,
            extractor,
            ledger: vec![0; classes * hidden],
            classes,
            hidden,
            lr: arith.from_real(hp.lr, 1)?,
            lr_real: hp.lr,
            noise,
            batch_size: hp.batch_size,
            rerandomize: true,
            noise_rng: rng_from(noise.seed, STREAM_ACTIVE_NOISE),
            crypto_rng: rng_from(crypto_seed, STREAM_ACTIVE_CRYPTO),
            inflight: BTreeMap::new(),
            times: PhaseTimes::default(),
            record: false,
            records: Vec::new(),
        })
    }

    /// Keeps every `ε_w` draw for later inspection.
    pub fn with_noise_recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    /// Whether the session asks the label holder to re-randomize ciphertexts
    /// it returns. Part of the negotiated configuration.
    pub fn with_rerandomize(mut self, on: bool) -> Self {
        self.rerandomize = on;
        self
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            version: PROTOCOL_VERSION,
            frac_bits: self.arith.frac_bits(),
            operand_bits: self.eval.scale().operand_bits(),
            lr: self.lr_real,
            hidden_dim: self.hidden as u32,
            classes: self.classes as u32,
            batch_size: self.batch_size as u32,
            noise_blind: self.noise.bounds.blind,
            noise_weight: self.noise.bounds.weight,
            rerandomize: self.rerandomize,
        }
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.sk
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.eval
    }

    pub fn extractor(&self) -> &FeatureExtractor<Fixed> {
        &self.extractor
    }

    /// `ε_acc` as a `c × d_h` matrix at scale 2f.
    pub fn ledger(&self) -> Tensor<i128> {
        Tensor::matrix(self.classes, self.hidden, self.ledger.clone()).expect("ledger shape")
    }

    pub fn times(&self) -> &PhaseTimes {
        &self.times
    }

    pub fn noise_records(&self) -> &[NoiseRecord] {
        &self.records
    }

    pub fn take_noise_records(&mut self) -> Vec<NoiseRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    fn f(&self) -> u32 {
        self.arith.frac_bits()
    }

    /// Runs the extractor on a batch and encrypts the activations.
    pub fn forward(&mut self, id: u64, step: u32, sample_ids: &[u64], x: &Tensor<f64>, mode: Mode) -> Result<ProtocolMessage, ProtocolError> {
        if self.inflight.contains_key(&id) {
            return Err(ProtocolError::DuplicateBatch(id));
        }
        if x.rows() != sample_ids.len() || x.dims().len() != 2 {
            return Err(ProtocolError::Shape(format!("{} sample ids for input dims {:?}", sample_ids.len(), x.dims())));
        }
        let (arith, extractor) = (&self.arith, &self.extractor);
        let (acts, cache) = self.times.time(Phase::Plaintext, || -> Result<_, ProtocolError> {
            let xi = encode_inputs(arith, x)?;
            Ok(extractor.forward(&xi)?)
        })?;
        let plain = PlainTensor::new(acts.dims().to_vec(), self.f(), acts.data().to_vec())?;
        let (eval, rng) = (&self.eval, &mut self.crypto_rng);
        let enc = self.times.time(Phase::Encrypt, || eval.encrypt(&plain, rng))?;
        self.inflight.insert(id, InFlight { mode, stage: Stage::AwaitSum, step, acts, cache });
        Ok(ProtocolMessage::new(id, step, Body::EncActivation { mode, sample_ids: sample_ids.to_vec(), acts: enc }))
    }

    fn slot<'a>(inflight: &'a BTreeMap<u64, InFlight>, msg: &ProtocolMessage, stage: Stage) -> Result<&'a InFlight, ProtocolError> {
        let s = inflight.get(&msg.id).ok_or(ProtocolError::MissingCache(msg.id))?;
        if s.stage != stage {
            let expected = match s.stage {
                Stage::AwaitSum => "NOISY_WSUM",
                Stage::AwaitWeightGrad => "ENC_WGRAD",
                Stage::AwaitActGrad => "ENC_ACT_GRAD",
            };
            return Err(ProtocolError::OutOfOrder { id: msg.id, expected, got: msg.tag().name() });
        }
        Ok(s)
    }

    /// Processes a message from the label holder. `None` means the batch is
    /// finished on this side.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Result<Option<ProtocolMessage>, ProtocolError> {
        match &msg.body {
            Body::NoisyWsum { .. } => self.denoise_sum(msg).map(Some),
            Body::EncWgrad { .. } => self.rewrap_gradient(msg).map(Some),
            Body::EncActGrad { .. } => self.backprop(msg).map(|_| None),
            Body::Control(c) => Err(ProtocolError::UnexpectedControl(format!("{c:?}"))),
            other => Err(ProtocolError::OutOfOrder { id: msg.id, expected: "a reply from the label holder", got: other.tag().name() }),
        }
    }

    /// Decrypts `W̃2·a + ε_s`, removes `ε_acc·a` exactly, and returns the
    /// still-blinded sum at scale 3f.
    fn denoise_sum(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let Body::NoisyWsum { sums } = &msg.body else { unreachable!() };
        let slot = Self::slot(&self.inflight, msg, Stage::AwaitSum)?;
        let batch = slot.acts.rows();
        expect_dims("NOISY_WSUM", sums.dims(), &[batch, self.classes])?;
        expect_scale("NOISY_WSUM", sums.scale(), 3 * self.f())?;
        let (eval, sk) = (&self.eval, &self.sk);
        let v = self.times.time(Phase::Decrypt, || eval.decrypt(sk, sums))?;
        let (c, d) = (self.classes, self.hidden);
        let ledger = &self.ledger;
        let acts = &slot.acts;
        let out = self.times.time(Phase::Plaintext, || -> Result<Vec<i128>, ProtocolError> {
            let mut out = Vec::with_capacity(batch * c);
            for b in 0..batch {
                for j in 0..c {
                    let acc = fixed::dot_exact((0..d).map(|k| (ledger[j * d + k], acts.at(b, k))))?;
                    out.push(fixed::sub(v.data()[b * c + j], acc)?);
                }
            }
            Ok(out)
        })?;
        let payload = PlainTensor::new(vec![batch, c], 3 * self.f(), out)?;
        let slot = self.inflight.get_mut(&msg.id).expect("checked above");
        if slot.mode == Mode::Infer {
            self.inflight.remove(&msg.id);
        } else {
            slot.stage = Stage::AwaitWeightGrad;
        }
        Ok(ProtocolMessage::new(msg.id, msg.step, Body::DenoisedWsum { sums: payload }))
    }

    /// Decrypts the blinded weight gradient, subtracts fresh weight noise
    /// `ε_w`, sends it with `[ε_acc]` (pre-update), then folds `ε_w` into the
    /// ledger.
    fn rewrap_gradient(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let Body::EncWgrad { grad } = &msg.body else { unreachable!() };
        Self::slot(&self.inflight, msg, Stage::AwaitWeightGrad)?;
        let (c, d, f2) = (self.classes, self.hidden, 2 * self.f());
        expect_dims("ENC_WGRAD", grad.dims(), &[c, d])?;
        expect_scale("ENC_WGRAD", grad.scale(), f2)?;
        let (eval, sk) = (&self.eval, &self.sk);
        let y = self.times.time(Phase::Decrypt, || eval.decrypt(sk, grad))?;
        let mut noise_rng = self.noise_rng.clone();
        let delta = grid_noise(&mut noise_rng, self.lr_real * self.noise.bounds.weight, f2, vec![c, d])?;
        let blinded = y.data().iter().zip(delta.data()).map(|(&a, &b)| fixed::sub(a, b)).collect::<Result<Vec<_>, _>>()?;
        let new_ledger = self.ledger.iter().zip(delta.data()).map(|(&a, &b)| fixed::add(a, b)).collect::<Result<Vec<_>, _>>()?;
        let limit = LEDGER_BITS + f2;
        let bits = new_ledger.iter().map(|&v| fixed::bit_len(v)).max().unwrap_or(0);
        if bits > limit {
            return Err(ProtocolError::LedgerOverflow { bits: bits.saturating_sub(f2), limit_bits: LEDGER_BITS });
        }
        let acc = PlainTensor::new(vec![c, d], f2, self.ledger.clone())?;
        let mut crypto_rng = self.crypto_rng.clone();
        let eval = &self.eval;
        let enc_acc = self
            .times
            .time(Phase::Encrypt, || eval.encrypt(&acc, &mut crypto_rng))
            .map_err(|e| match e {
                CodecError::OperandBound { .. } => ProtocolError::LedgerOverflow { bits, limit_bits: LEDGER_BITS },
                e => e.into(),
            })?;
        self.noise_rng = noise_rng;
        self.crypto_rng = crypto_rng;
        self.ledger = new_ledger;
        if self.record {
            self.records.push(NoiseRecord::new(msg.id, msg.step, NoiseKind::Weight, &delta));
        }
        self.inflight.get_mut(&msg.id).expect("checked above").stage = Stage::AwaitActGrad;
        let payload = PlainTensor::new(vec![c, d], f2, blinded)?;
        Ok(ProtocolMessage::new(msg.id, msg.step, Body::BlindedWgrad { grad: payload, acc_noise: enc_acc }))
    }

    /// Decrypts `∂L/∂a`, rescales it to f and updates the extractor.
    fn backprop(&mut self, msg: &ProtocolMessage) -> Result<(), ProtocolError> {
        let Body::EncActGrad { grad } = &msg.body else { unreachable!() };
        let slot = Self::slot(&self.inflight, msg, Stage::AwaitActGrad)?;
        let batch = slot.acts.rows();
        expect_dims("ENC_ACT_GRAD", grad.dims(), &[batch, self.hidden])?;
        expect_scale("ENC_ACT_GRAD", grad.scale(), 3 * self.f())?;
        let (eval, sk) = (&self.eval, &self.sk);
        let raw = self.times.time(Phase::Decrypt, || eval.decrypt(sk, grad))?;
        let f = self.f();
        let (extractor, lr) = (&self.extractor, self.lr);
        let steps = self.times.time(Phase::Plaintext, || -> Result<_, ProtocolError> {
            let da = raw.data().iter().map(|&v| fixed::rescale(v, 2 * f)).collect::<Result<Vec<_>, _>>()?;
            let da = Tensor::matrix(batch, self.hidden, da)?;
            Ok(extractor.backward(&slot.cache, &da, lr)?)
        })?;
        let mut updated = self.extractor.clone();
        updated.apply(&steps)?;
        self.extractor = updated;
        self.inflight.remove(&msg.id);
        Ok(())
    }

    /// Step counter of an in-flight batch, if any.
    pub fn step_of(&self, id: u64) -> Option<u32> {
        self.inflight.get(&id).map(|s| s.step)
    }

    /// Drops all in-flight state.
    pub fn abort_in_flight(&mut self) {
        self.inflight.clear();
    }
}
