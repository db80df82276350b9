use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha20Rng;

use super::message::{Body, Control, Metrics, Mode, ProtocolMessage, SessionConfig};
use super::{
    expect_dims, expect_scale, grid_noise, rng_from, NoiseKind, NoiseRecord, Phase, PhaseTimes, ProtocolError, STREAM_PASSIVE_CRYPTO,
    STREAM_PASSIVE_NOISE,
};
use crate::codec::{CipherTensor, Evaluator, FixedScale, PlainTensor};
use crate::fixed;
use crate::nn::{argmax_rows, scale_gradient, seeded_rng, softmax_xent, Arith, Fixed, Head, NoiseBounds, Tensor, STREAM_HEAD};
use crate::phe::PublicKey;

#[derive(Debug, Clone)]
enum InFlight {
    AwaitSum { mode: Mode, sample_ids: Vec<u64>, acts: CipherTensor, blind: PlainTensor },
    AwaitWeightGrad { grad: Tensor<i128>, act_grad: PlainTensor, blind: PlainTensor },
}

/// Label holder: keeps the labels and the noisy classifier weights `W̃2`
/// (scale 2f). Holds only the public key.
#[derive(Debug, Clone)]
pub struct PassiveParty {
    eval: Evaluator,
    arith: Fixed,
    config: SessionConfig,
    weights: Vec<i128>,
    classes: usize,
    hidden: usize,
    lr: i128,
    labels: HashMap<u64, usize>,
    noise_rng: ChaCha20Rng,
    crypto_rng: ChaCha20Rng,
    inflight: BTreeMap<u64, InFlight>,
    metrics: Metrics,
    predictions: Vec<(u64, usize)>,
    times: PhaseTimes,
    record: bool,
    records: Vec<NoiseRecord>,
}

impl PassiveParty {
    /// `head_seed` reproduces the centralized head initialization.
    pub fn new(
        pk: PublicKey,
        config: &SessionConfig,
        head_seed: u64,
        noise_seed: Option<u64>,
        crypto_seed: Option<u64>,
        labels: HashMap<u64, usize>,
    ) -> Result<Self, ProtocolError> {
        let arith = Fixed::new(config.frac_bits)?;
        let fs = FixedScale::for_key(config.frac_bits, &pk)?.with_operand_bits(config.operand_bits);
        let (classes, hidden) = (config.classes as usize, config.hidden_dim as usize);
        if classes < 2 || hidden == 0 {
            return Err(ProtocolError::Config(format!("need at least 2 classes and 1 hidden unit, got {classes} and {hidden}")));
        }
        if let Some((id, &l)) = labels.iter().find(|(_, &l)| l >= classes) {
            return Err(ProtocolError::Config(format!("label {l} for sample {id} is outside 0..{classes}")));
        }
        let bounds = NoiseBounds { blind: config.noise_blind, weight: config.noise_weight };
        let problems = super::NoiseConfig { bounds, seed: noise_seed }.problems();
        if !problems.is_empty() {
            return Err(ProtocolError::Config(problems.join("; ")));
        }
        let head = Head::init(&arith, classes, hidden, &mut seeded_rng(head_seed, STREAM_HEAD))?;
        Ok(Self {
            eval: Evaluator::with_scale(pk, fs),
            arith,
            config: config.clone(),
            weights: head.w.into_data(),
            classes,
            hidden,
            lr: arith.from_real(config.lr, 1)?,
            labels,
            noise_rng: rng_from(noise_seed, STREAM_PASSIVE_NOISE),
            crypto_rng: rng_from(crypto_seed, STREAM_PASSIVE_CRYPTO),
            inflight: BTreeMap::new(),
            metrics: Metrics::default(),
            predictions: Vec::new(),
            times: PhaseTimes::default(),
            record: false,
            records: Vec::new(),
        })
    }

    pub fn with_noise_recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn session_config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.eval
    }

    /// `W̃2 = W2 + ε_acc` at scale 2f.
    pub fn noisy_weights(&self) -> Tensor<i128> {
        Tensor::matrix(self.classes, self.hidden, self.weights.clone()).expect("weight shape")
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics
    }

    /// `(sample id, predicted class)` for inference batches, in arrival order.
    pub fn predictions(&self) -> &[(u64, usize)] {
        &self.predictions
    }

    pub fn take_predictions(&mut self) -> Vec<(u64, usize)> {
        std::mem::take(&mut self.predictions)
    }

    pub fn times(&self) -> &PhaseTimes {
        &self.times
    }

    pub fn noise_records(&self) -> &[NoiseRecord] {
        &self.records
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    pub fn abort_in_flight(&mut self) {
        self.inflight.clear();
    }

    fn f(&self) -> u32 {
        self.arith.frac_bits()
    }

    fn weight_tensor(&self) -> PlainTensor {
        PlainTensor::new(vec![self.classes, self.hidden], 2 * self.f(), self.weights.clone()).expect("weight shape")
    }

    fn maybe_rerandomize(&mut self, c: CipherTensor) -> CipherTensor {
        if !self.config.rerandomize {
            return c;
        }
        let (eval, rng) = (&self.eval, &mut self.crypto_rng);
        self.times.time(Phase::Encrypt, || eval.rerandomize(&c, rng))
    }

    /// Processes one message from the key holder. `None` means nothing is
    /// sent back.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Result<Option<ProtocolMessage>, ProtocolError> {
        match &msg.body {
            Body::EncActivation { .. } => self.weighted_sum(msg).map(Some),
            Body::DenoisedWsum { .. } => self.predict(msg),
            Body::BlindedWgrad { .. } => self.update(msg).map(Some),
            Body::Control(Control::PhaseEnd { .. }) => {
                let m = std::mem::take(&mut self.metrics);
                Ok(Some(ProtocolMessage::new(msg.id, msg.step, Body::Control(Control::Metrics(m)))))
            }
            Body::Control(c) => Err(ProtocolError::UnexpectedControl(format!("{c:?}"))),
            other => Err(ProtocolError::OutOfOrder { id: msg.id, expected: "a request from the key holder", got: other.tag().name() }),
        }
    }

    /// `[W̃2·a + ε_s]` at scale 3f.
    fn weighted_sum(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let Body::EncActivation { mode, sample_ids, acts } = &msg.body else { unreachable!() };
        if self.inflight.contains_key(&msg.id) {
            return Err(ProtocolError::DuplicateBatch(msg.id));
        }
        let batch = sample_ids.len();
        expect_dims("ENC_ACTIVATION", acts.dims(), &[batch, self.hidden])?;
        expect_scale("ENC_ACTIVATION", acts.scale(), self.f())?;
        if *mode == Mode::Train {
            if let Some(&id) = sample_ids.iter().find(|id| !self.labels.contains_key(id)) {
                return Err(ProtocolError::MissingLabel(id));
            }
        }
        let f3 = 3 * self.f();
        let mut noise_rng = self.noise_rng.clone();
        let blind = grid_noise(&mut noise_rng, self.config.noise_blind, f3, vec![batch, self.classes])?;
        let w = self.weight_tensor();
        let eval = &self.eval;
        let sums = self.times.time(Phase::Homomorphic, || -> Result<_, ProtocolError> { Ok(eval.add_plain(&eval.matvec(&w, acts)?, &blind)?) })?;
        let sums = self.maybe_rerandomize(sums);
        self.noise_rng = noise_rng;
        if self.record {
            self.records.push(NoiseRecord::new(msg.id, msg.step, NoiseKind::SumBlind, &blind));
        }
        self.inflight.insert(msg.id, InFlight::AwaitSum { mode: *mode, sample_ids: sample_ids.clone(), acts: acts.clone(), blind });
        Ok(ProtocolMessage::new(msg.id, msg.step, Body::NoisyWsum { sums }))
    }

    /// Unblinds the logits, scores the batch and, when training, returns the
    /// blinded weight gradient `[Σ_b η g_b ⊗ a_b + ε_s']` at scale 2f.
    fn predict(&mut self, msg: &ProtocolMessage) -> Result<Option<ProtocolMessage>, ProtocolError> {
        let Body::DenoisedWsum { sums } = &msg.body else { unreachable!() };
        let Some(InFlight::AwaitSum { mode, sample_ids, acts, blind }) = self.inflight.get(&msg.id) else {
            return Err(match self.inflight.contains_key(&msg.id) {
                true => ProtocolError::OutOfOrder { id: msg.id, expected: "BLINDED_WGRAD", got: msg.tag().name() },
                false => ProtocolError::MissingCache(msg.id),
            });
        };
        let (f, batch, c, d) = (self.f(), sample_ids.len(), self.classes, self.hidden);
        expect_dims("DENOISED_WSUM", sums.dims(), &[batch, c])?;
        expect_scale("DENOISED_WSUM", sums.scale(), 3 * f)?;
        let arith = self.arith;
        let labels = &self.labels;
        let (logits, scored) = self.times.time(Phase::Plaintext, || -> Result<_, ProtocolError> {
            let z = sums
                .data()
                .iter()
                .zip(blind.data())
                .map(|(&v, &s)| fixed::rescale(fixed::sub(v, s)?, 2 * f))
                .collect::<Result<Vec<_>, _>>()?;
            let z = Tensor::matrix(batch, c, z)?;
            let scored = if sample_ids.iter().all(|id| labels.contains_key(id)) {
                let mut t = vec![0.0; batch * c];
                for (b, id) in sample_ids.iter().enumerate() {
                    t[b * c + labels[id]] = 1.0;
                }
                Some(softmax_xent(&arith, &z, &Tensor::matrix(batch, c, t)?)?)
            } else {
                None
            };
            Ok((z, scored))
        })?;
        let preds = argmax_rows(&arith, &logits);
        let mut metrics = self.metrics;
        if let Some((loss, _, _)) = &scored {
            metrics.loss_sum += loss;
            metrics.correct += sample_ids.iter().zip(&preds).filter(|(id, &p)| labels[*id] == p).count() as u64;
            metrics.count += batch as u64;
        }
        let predictions: Vec<(u64, usize)> = sample_ids.iter().copied().zip(preds).collect();

        if *mode == Mode::Infer {
            self.metrics = metrics;
            self.predictions.extend(predictions);
            self.inflight.remove(&msg.id);
            return Ok(None);
        }

        let (_, _, g) = scored.ok_or(ProtocolError::MissingLabel(sample_ids[0]))?;
        let f2 = 2 * f;
        let mut noise_rng = self.noise_rng.clone();
        let grad_blind = grid_noise(&mut noise_rng, self.config.noise_blind, f2, vec![c, d])?;
        let scaled = self.times.time(Phase::Plaintext, || scale_gradient(&arith, self.lr, &g))?;
        let scaled = PlainTensor::new(vec![batch, c], f, scaled.into_data())?;
        let weights = &self.weights;
        let act_grad = self.times.time(Phase::Plaintext, || -> Result<Vec<i128>, ProtocolError> {
            let mut out = Vec::with_capacity(batch * d);
            for b in 0..batch {
                for k in 0..d {
                    out.push(fixed::dot_exact((0..c).map(|j| (weights[j * d + k], g.at(b, j))))?);
                }
            }
            Ok(out)
        })?;
        let act_grad = PlainTensor::new(vec![batch, d], 3 * f, act_grad)?;
        let eval = &self.eval;
        let enc = self
            .times
            .time(Phase::Homomorphic, || -> Result<_, ProtocolError> { Ok(eval.add_plain(&eval.outer_sum(&scaled, acts)?, &grad_blind)?) })?;
        let enc = self.maybe_rerandomize(enc);
        self.noise_rng = noise_rng;
        self.metrics = metrics;
        if self.record {
            self.records.push(NoiseRecord::new(msg.id, msg.step, NoiseKind::GradBlind, &grad_blind));
        }
        self.inflight.insert(msg.id, InFlight::AwaitWeightGrad { grad: g, act_grad, blind: grad_blind });
        Ok(Some(ProtocolMessage::new(msg.id, msg.step, Body::EncWgrad { grad: enc })))
    }

    /// Applies the re-blinded step to `W̃2` and returns
    /// `[∂L/∂a] = [ε_acc]·(-g) + W̃2ᵀ g` at scale 3f.
    fn update(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let Body::BlindedWgrad { grad, acc_noise } = &msg.body else { unreachable!() };
        let Some(InFlight::AwaitWeightGrad { grad: g, act_grad, blind }) = self.inflight.get(&msg.id) else {
            return Err(match self.inflight.contains_key(&msg.id) {
                true => ProtocolError::OutOfOrder { id: msg.id, expected: "DENOISED_WSUM", got: msg.tag().name() },
                false => ProtocolError::MissingCache(msg.id),
            });
        };
        let (f, c, d, batch) = (self.f(), self.classes, self.hidden, g.rows());
        expect_dims("BLINDED_WGRAD", grad.dims(), &[c, d])?;
        expect_scale("BLINDED_WGRAD", grad.scale(), 2 * f)?;
        expect_dims("BLINDED_WGRAD noise", acc_noise.dims(), &[c, d])?;
        expect_scale("BLINDED_WGRAD noise", acc_noise.scale(), 2 * f)?;
        let weights = self
            .weights
            .iter()
            .zip(grad.data().iter().zip(blind.data()))
            .map(|(&w, (&p, &s))| fixed::sub(w, fixed::sub(p, s)?))
            .collect::<Result<Vec<_>, _>>()?;
        let neg_g = g.data().iter().map(|&v| v.checked_neg().ok_or(fixed::FixedError::Overflow)).collect::<Result<Vec<_>, _>>()?;
        let neg_g = PlainTensor::new(vec![batch, c], f, neg_g)?;
        let eval = &self.eval;
        let enc = self
            .times
            .time(Phase::Homomorphic, || -> Result<_, ProtocolError> { Ok(eval.add_plain(&eval.vecmat(acc_noise, &neg_g)?, act_grad)?) })?;
        let enc = self.maybe_rerandomize(enc);
        self.weights = weights;
        self.inflight.remove(&msg.id);
        Ok(ProtocolMessage::new(msg.id, msg.step, Body::EncActGrad { grad: enc }))
    }
}
