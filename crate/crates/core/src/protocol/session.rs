use std::time::{Duration, Instant};

use super::message::{Body, Control, DecodeContext, Metrics, Mode, ProtocolMessage, SessionConfig, Tag};
use super::{ActiveParty, PassiveParty, PhaseTimes, ProtocolError};
use crate::nn::Tensor;
use crate::phe::PublicKey;
use crate::transport::{accept_handshake, duplex, initiate_handshake, Channel, InProcess, Recording, Transcript, TransportError};

/// Result of driving one batch through the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub id: u64,
    pub step: u32,
    pub samples: usize,
    /// Messages exchanged for this batch, both directions.
    pub messages: usize,
}

/// The key holder's view of a running session, local or remote.
pub trait Session {
    fn active(&self) -> &ActiveParty;

    fn train_step(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError>;

    /// Forward pass only; the label holder scores the batch.
    fn infer(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError>;

    /// Closes a phase and collects the label holder's metrics since the last one.
    fn end_phase(&mut self, epoch: u32, mode: Mode) -> Result<Metrics, ProtocolError>;

    fn shutdown(&mut self) -> Result<(), ProtocolError>;

    /// Active-side phase times plus transport.
    fn times(&self) -> PhaseTimes;

    /// Tag of the last message put on the wire.
    fn last_tag(&self) -> Option<Tag>;
}

fn decode_ctx(pk: &PublicKey, config: &SessionConfig) -> DecodeContext {
    DecodeContext { public_key: Some(pk.clone()), operand_bits: config.operand_bits }
}

/// Both parties in one process, talking through an in-memory channel that
/// still serializes every message.
pub struct LocalSession {
    active: ActiveParty,
    passive: PassiveParty,
    a_end: Recording<InProcess>,
    p_end: InProcess,
    ctx: DecodeContext,
    next_id: u64,
    step: u32,
    transport: Duration,
    last: Option<Tag>,
}

impl LocalSession {
    /// Session whose transcript keeps only a running digest.
    pub fn new(active: ActiveParty, passive: PassiveParty) -> Result<Self, ProtocolError> {
        Self::with_transcript(active, passive, Transcript::hashing())
    }

    /// Records every frame, handshake included, into `transcript`.
    pub fn with_transcript(active: ActiveParty, passive: PassiveParty, transcript: Transcript) -> Result<Self, ProtocolError> {
        let (a, p) = duplex();
        let mut a_end = Recording::new(a, transcript);
        let mut p_end = p;
        let pk = active.private_key().public_key().clone();
        let offer = active.session_config();
        // Both ends live on this thread, so the exchange is driven by hand.
        let hello = Control::Hello { version: offer.version, public_key: pk.clone(), config: offer.clone() };
        a_end.send(&ProtocolMessage::new(0, 0, Body::Control(hello)))?;
        let outcome = accept_handshake(&mut p_end, passive.session_config())?;
        if &outcome.public_key != passive.evaluator().public_key() {
            return Err(TransportError::Handshake("label holder was built for a different public key".into()).into());
        }
        let ctx = decode_ctx(&pk, &offer);
        match a_end.recv(&ctx)?.body {
            Body::Control(Control::Accept) => {}
            Body::Control(Control::Refuse { reason }) => return Err(TransportError::Refused(reason).into()),
            other => return Err(TransportError::Handshake(format!("expected Accept, got {}", other.tag().name())).into()),
        }
        Ok(Self { active, passive, a_end, p_end, ctx, next_id: 1, step: 0, transport: Duration::ZERO, last: None })
    }

    pub fn passive(&self) -> &PassiveParty {
        &self.passive
    }

    pub fn passive_mut(&mut self) -> &mut PassiveParty {
        &mut self.passive
    }

    pub fn active_mut(&mut self) -> &mut ActiveParty {
        &mut self.active
    }

    /// Every frame that crossed the channel.
    pub fn transcript(&self) -> &Transcript {
        self.a_end.transcript()
    }

    pub fn into_parties(self) -> (ActiveParty, PassiveParty) {
        (self.active, self.passive)
    }

    fn to_passive(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let start = Instant::now();
        self.last = Some(msg.body.tag());
        self.a_end.send(msg)?;
        let out = self.p_end.recv(&self.ctx)?;
        self.transport += start.elapsed();
        Ok(out)
    }

    fn to_active(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
        let start = Instant::now();
        self.last = Some(msg.body.tag());
        self.p_end.send(msg)?;
        let out = self.a_end.recv(&self.ctx)?;
        self.transport += start.elapsed();
        Ok(out)
    }

    fn run_batch(&mut self, sample_ids: &[u64], x: &Tensor<f64>, mode: Mode) -> Result<StepOutcome, ProtocolError> {
        let (id, step) = (self.next_id, self.step);
        let mut msg = self.active.forward(id, step, sample_ids, x, mode)?;
        let mut messages = 0;
        loop {
            let received = self.to_passive(&msg)?;
            messages += 1;
            let Some(reply) = self.passive.handle(&received)? else { break };
            let received = self.to_active(&reply)?;
            messages += 1;
            match self.active.handle(&received)? {
                Some(next) => msg = next,
                None => break,
            }
        }
        Ok(StepOutcome { id, step, samples: sample_ids.len(), messages })
    }

    /// Runs a batch; on failure both parties roll back to their state before
    /// the batch and the channel is drained.
    fn atomic_batch(&mut self, sample_ids: &[u64], x: &Tensor<f64>, mode: Mode) -> Result<StepOutcome, ProtocolError> {
        let saved = (self.active.clone(), self.passive.clone());
        match self.run_batch(sample_ids, x, mode) {
            Ok(out) => {
                self.next_id += 1;
                if mode == Mode::Train {
                    self.step += 1;
                }
                Ok(out)
            }
            Err(e) => {
                (self.active, self.passive) = saved;
                self.a_end.inner_mut().drain();
                self.p_end.drain();
                Err(e)
            }
        }
    }
}

impl Session for LocalSession {
    fn active(&self) -> &ActiveParty {
        &self.active
    }

    fn train_step(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError> {
        self.atomic_batch(sample_ids, x, Mode::Train)
    }

    fn infer(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError> {
        self.atomic_batch(sample_ids, x, Mode::Infer)
    }

    fn end_phase(&mut self, epoch: u32, mode: Mode) -> Result<Metrics, ProtocolError> {
        let msg = ProtocolMessage::new(0, self.step, Body::Control(Control::PhaseEnd { epoch, mode }));
        let received = self.to_passive(&msg)?;
        let reply = self.passive.handle(&received)?.ok_or_else(|| ProtocolError::UnexpectedControl("no reply to PhaseEnd".into()))?;
        match self.to_active(&reply)?.body {
            Body::Control(Control::Metrics(m)) => Ok(m),
            other => Err(ProtocolError::UnexpectedControl(format!("expected Metrics, got {}", other.tag().name()))),
        }
    }

    fn shutdown(&mut self) -> Result<(), ProtocolError> {
        Ok(())
    }

    fn times(&self) -> PhaseTimes {
        let mut t = *self.active.times();
        t.transport += self.transport;
        t
    }

    fn last_tag(&self) -> Option<Tag> {
        self.last
    }
}

/// Key holder side of a session with a remote label holder.
pub struct RemoteSession<C: Channel> {
    active: ActiveParty,
    channel: C,
    ctx: DecodeContext,
    next_id: u64,
    step: u32,
    transport: Duration,
    last: Option<Tag>,
}

impl<C: Channel> RemoteSession<C> {
    /// Performs the handshake; fails if the peer refuses the configuration.
    pub fn connect(active: ActiveParty, mut channel: C) -> Result<Self, ProtocolError> {
        let pk = active.private_key().public_key().clone();
        let config = active.session_config();
        initiate_handshake(&mut channel, &pk, &config)?;
        let ctx = decode_ctx(&pk, &config);
        Ok(Self { active, channel, ctx, next_id: 1, step: 0, transport: Duration::ZERO, last: None })
    }

    pub fn into_parts(self) -> (ActiveParty, C) {
        (self.active, self.channel)
    }

    fn exchange(&mut self, msg: &ProtocolMessage, await_reply: bool) -> Result<Option<ProtocolMessage>, ProtocolError> {
        let start = Instant::now();
        self.last = Some(msg.body.tag());
        self.channel.send(msg)?;
        let out = if await_reply { Some(self.channel.recv(&self.ctx)?) } else { None };
        if let Some(m) = &out {
            self.last = Some(m.body.tag());
        }
        self.transport += start.elapsed();
        Ok(out)
    }

    fn run_batch(&mut self, sample_ids: &[u64], x: &Tensor<f64>, mode: Mode) -> Result<StepOutcome, ProtocolError> {
        let (id, step) = (self.next_id, self.step);
        self.next_id += 1;
        let mut msg = self.active.forward(id, step, sample_ids, x, mode)?;
        let mut messages = 0;
        let result = loop {
            // The batch is finished locally once nothing is left in flight.
            let done = self.active.step_of(id).is_none();
            let received = match self.exchange(&msg, !done) {
                Ok(r) => r,
                Err(e) => break Err(e),
            };
            messages += if done { 1 } else { 2 };
            let Some(received) = received else { break Ok(()) };
            match self.active.handle(&received) {
                Ok(Some(next)) => msg = next,
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        if let Err(e) = result {
            self.active.abort_in_flight();
            return Err(e);
        }
        if mode == Mode::Train {
            self.step += 1;
        }
        Ok(StepOutcome { id, step, samples: sample_ids.len(), messages })
    }
}

impl<C: Channel> Session for RemoteSession<C> {
    fn active(&self) -> &ActiveParty {
        &self.active
    }

    fn train_step(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError> {
        self.run_batch(sample_ids, x, Mode::Train)
    }

    fn infer(&mut self, sample_ids: &[u64], x: &Tensor<f64>) -> Result<StepOutcome, ProtocolError> {
        self.run_batch(sample_ids, x, Mode::Infer)
    }

    fn end_phase(&mut self, epoch: u32, mode: Mode) -> Result<Metrics, ProtocolError> {
        let msg = ProtocolMessage::new(0, self.step, Body::Control(Control::PhaseEnd { epoch, mode }));
        match self.exchange(&msg, true)?.map(|m| m.body) {
            Some(Body::Control(Control::Metrics(m))) => Ok(m),
            Some(other) => Err(ProtocolError::UnexpectedControl(format!("expected Metrics, got {}", other.tag().name()))),
            None => unreachable!(),
        }
    }

    fn shutdown(&mut self) -> Result<(), ProtocolError> {
        self.exchange(&ProtocolMessage::new(0, self.step, Body::Control(Control::Shutdown)), false)?;
        Ok(())
    }

    fn times(&self) -> PhaseTimes {
        let mut t = *self.active.times();
        t.transport += self.transport;
        t
    }

    fn last_tag(&self) -> Option<Tag> {
        self.last
    }
}

/// Label holder loop: handshake, then answer requests until `Shutdown` or
/// the peer disconnects. `build` receives the key holder's public key.
pub fn run_passive<C: Channel>(
    channel: &mut C,
    local: &SessionConfig,
    build: impl FnOnce(PublicKey) -> Result<PassiveParty, ProtocolError>,
) -> Result<PassiveParty, ProtocolError> {
    let outcome = accept_handshake(channel, local)?;
    let ctx = decode_ctx(&outcome.public_key, local);
    let mut passive = build(outcome.public_key)?;
    loop {
        let msg = match channel.recv(&ctx) {
            Ok(m) => m,
            Err(TransportError::Closed) => return Ok(passive),
            Err(e) => return Err(e.into()),
        };
        match &msg.body {
            Body::Control(Control::Shutdown) => return Ok(passive),
            Body::Control(Control::Hello { .. }) => return Err(ProtocolError::UnexpectedControl("Hello after the session was established".into())),
            _ => {}
        }
        if let Some(reply) = passive.handle(&msg)? {
            channel.send(&reply)?;
        }
    }
}
