//! Protocol messages and their payload encodings.
//!
//! Every payload starts with an 8-byte batch id and a 4-byte step counter.

use serde::{Deserialize, Serialize};

use crate::codec::{CipherTensor, CodecError, PlainTensor};
use crate::phe::PublicKey;
use crate::wire::{Reader, WireError, Writer};

pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    EncActivation = 0x01,
    NoisyWsum = 0x02,
    DenoisedWsum = 0x03,
    EncWgrad = 0x04,
    BlindedWgrad = 0x05,
    EncActGrad = 0x06,
    Control = 0x07,
}

impl Tag {
    pub const ALL: [Tag; 7] = [Tag::EncActivation, Tag::NoisyWsum, Tag::DenoisedWsum, Tag::EncWgrad, Tag::BlindedWgrad, Tag::EncActGrad, Tag::Control];

    pub fn from_byte(b: u8) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| *t as u8 == b)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::EncActivation => "ENC_ACTIVATION",
            Tag::NoisyWsum => "NOISY_WSUM",
            Tag::DenoisedWsum => "DENOISED_WSUM",
            Tag::EncWgrad => "ENC_WGRAD",
            Tag::BlindedWgrad => "BLINDED_WGRAD",
            Tag::EncActGrad => "ENC_ACT_GRAD",
            Tag::Control => "CONTROL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Parameters both parties must agree on before any data flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub version: u16,
    pub frac_bits: u32,
    pub operand_bits: u32,
    pub lr: f64,
    pub hidden_dim: u32,
    pub classes: u32,
    pub batch_size: u32,
    pub noise_blind: f64,
    pub noise_weight: f64,
    pub rerandomize: bool,
}

impl SessionConfig {
    /// Human-readable differences, each naming both values.
    pub fn mismatches(&self, other: &SessionConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}: {a} vs {b}"));
            }
        };
        check("version", self.version.to_string(), other.version.to_string());
        check("frac_bits", self.frac_bits.to_string(), other.frac_bits.to_string());
        check("operand_bits", self.operand_bits.to_string(), other.operand_bits.to_string());
        check("lr", self.lr.to_string(), other.lr.to_string());
        check("hidden_dim", self.hidden_dim.to_string(), other.hidden_dim.to_string());
        check("classes", self.classes.to_string(), other.classes.to_string());
        check("batch_size", self.batch_size.to_string(), other.batch_size.to_string());
        check("noise_blind", self.noise_blind.to_string(), other.noise_blind.to_string());
        check("noise_weight", self.noise_weight.to_string(), other.noise_weight.to_string());
        check("rerandomize", self.rerandomize.to_string(), other.rerandomize.to_string());
        out
    }

    fn write(&self, w: &mut Writer) {
        w.u16(self.version).u32(self.frac_bits).u32(self.operand_bits).f64(self.lr);
        w.u32(self.hidden_dim).u32(self.classes).u32(self.batch_size);
        w.f64(self.noise_blind).f64(self.noise_weight).u8(self.rerandomize as u8);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            version: r.u16()?,
            frac_bits: r.u32()?,
            operand_bits: r.u32()?,
            lr: r.f64()?,
            hidden_dim: r.u32()?,
            classes: r.u32()?,
            batch_size: r.u32()?,
            noise_blind: r.f64()?,
            noise_weight: r.f64()?,
            rerandomize: r.u8()? != 0,
        })
    }
}

/// Aggregate metrics the label holder reports back.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub loss_sum: f64,
    pub correct: u64,
    pub count: u64,
}

impl Metrics {
    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Hello { version: u16, public_key: PublicKey, config: SessionConfig },
    Accept,
    Refuse { reason: String },
    /// Ends a training or evaluation phase; the passive answers with `Metrics`.
    PhaseEnd { epoch: u32, mode: Mode },
    Metrics(Metrics),
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    EncActivation { mode: Mode, sample_ids: Vec<u64>, acts: CipherTensor },
    NoisyWsum { sums: CipherTensor },
    DenoisedWsum { sums: PlainTensor },
    EncWgrad { grad: CipherTensor },
    BlindedWgrad { grad: PlainTensor, acc_noise: CipherTensor },
    EncActGrad { grad: CipherTensor },
    Control(Control),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub id: u64,
    pub step: u32,
    pub body: Body,
}

/// What a receiver needs to validate ciphertexts in a payload.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub public_key: Option<PublicKey>,
    pub operand_bits: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum MessageError {
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("{tag} payload carries ciphertexts but no public key is established")]
    NoKey { tag: &'static str },
    #[error("malformed {tag} payload: {reason}")]
    Malformed { tag: &'static str, reason: String },
}

impl Body {
    pub fn tag(&self) -> Tag {
        match self {
            Body::EncActivation { .. } => Tag::EncActivation,
            Body::NoisyWsum { .. } => Tag::NoisyWsum,
            Body::DenoisedWsum { .. } => Tag::DenoisedWsum,
            Body::EncWgrad { .. } => Tag::EncWgrad,
            Body::BlindedWgrad { .. } => Tag::BlindedWgrad,
            Body::EncActGrad { .. } => Tag::EncActGrad,
            Body::Control(_) => Tag::Control,
        }
    }

    /// Every ciphertext tensor carried by the body.
    pub fn cipher_tensors(&self) -> Vec<&CipherTensor> {
        match self {
            Body::EncActivation { acts, .. } => vec![acts],
            Body::NoisyWsum { sums } => vec![sums],
            Body::EncWgrad { grad } | Body::EncActGrad { grad } => vec![grad],
            Body::BlindedWgrad { acc_noise, .. } => vec![acc_noise],
            Body::DenoisedWsum { .. } | Body::Control(_) => vec![],
        }
    }
}

impl ProtocolMessage {
    pub fn new(id: u64, step: u32, body: Body) -> Self {
        Self { id, step, body }
    }

    pub fn tag(&self) -> Tag {
        self.body.tag()
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.id).u32(self.step);
        match &self.body {
            Body::EncActivation { mode, sample_ids, acts } => {
                w.u8(matches!(mode, Mode::Infer) as u8);
                w.u32(sample_ids.len() as u32);
                for &s in sample_ids {
                    w.u64(s);
                }
                acts.write(&mut w);
            }
            Body::NoisyWsum { sums } => sums.write(&mut w),
            Body::DenoisedWsum { sums } => sums.write(&mut w),
            Body::EncWgrad { grad } | Body::EncActGrad { grad } => grad.write(&mut w),
            Body::BlindedWgrad { grad, acc_noise } => {
                grad.write(&mut w);
                acc_noise.write(&mut w);
            }
            Body::Control(c) => write_control(&mut w, c),
        }
        w.into_bytes()
    }

    pub fn decode(tag_byte: u8, payload: &[u8], ctx: &DecodeContext) -> Result<Self, MessageError> {
        let tag = Tag::from_byte(tag_byte).ok_or(MessageError::UnknownTag(tag_byte))?;
        let name = tag.name();
        let malformed = |reason: String| MessageError::Malformed { tag: name, reason };
        let mut r = Reader::new(payload);
        let id = r.u64().map_err(|e| malformed(e.to_string()))?;
        let step = r.u32().map_err(|e| malformed(e.to_string()))?;
        let cipher = |r: &mut Reader<'_>| -> Result<CipherTensor, MessageError> {
            let pk = ctx.public_key.as_ref().ok_or(MessageError::NoKey { tag: name })?;
            let t = CipherTensor::read(r, pk, 0).map_err(|e: CodecError| malformed(e.to_string()))?;
            let bound = ctx.operand_bits + t.scale();
            Ok(t.with_bound_bits(bound))
        };
        let plain = |r: &mut Reader<'_>| PlainTensor::read(r).map_err(|e| malformed(e.to_string()));
        let body = match tag {
            Tag::EncActivation => {
                let mode = match r.u8().map_err(|e| malformed(e.to_string()))? {
                    0 => Mode::Train,
                    1 => Mode::Infer,
                    m => return Err(malformed(format!("bad mode byte {m}"))),
                };
                let n = r.count(8).map_err(|e| malformed(e.to_string()))?;
                let sample_ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>().map_err(|e| malformed(e.to_string()))?;
                Body::EncActivation { mode, sample_ids, acts: cipher(&mut r)? }
            }
            Tag::NoisyWsum => Body::NoisyWsum { sums: cipher(&mut r)? },
            Tag::DenoisedWsum => Body::DenoisedWsum { sums: plain(&mut r)? },
            Tag::EncWgrad => Body::EncWgrad { grad: cipher(&mut r)? },
            Tag::BlindedWgrad => {
                let grad = plain(&mut r)?;
                Body::BlindedWgrad { grad, acc_noise: cipher(&mut r)? }
            }
            Tag::EncActGrad => Body::EncActGrad { grad: cipher(&mut r)? },
            Tag::Control => Body::Control(read_control(&mut r).map_err(|e| malformed(e.to_string()))?),
        };
        r.finish().map_err(|e| malformed(e.to_string()))?;
        Ok(Self { id, step, body })
    }
}

fn write_control(w: &mut Writer, c: &Control) {
    match c {
        Control::Hello { version, public_key, config } => {
            w.u8(0).u16(*version).blob(&public_key.to_bytes());
            config.write(w);
        }
        Control::Accept => {
            w.u8(1);
        }
        Control::Refuse { reason } => {
            w.u8(2).string(reason);
        }
        Control::PhaseEnd { epoch, mode } => {
            w.u8(3).u32(*epoch).u8(matches!(mode, Mode::Infer) as u8);
        }
        Control::Metrics(m) => {
            w.u8(4).f64(m.loss_sum).u64(m.correct).u64(m.count);
        }
        Control::Shutdown => {
            w.u8(5);
        }
    }
}

fn read_control(r: &mut Reader<'_>) -> Result<Control, WireError> {
    Ok(match r.u8()? {
        0 => {
            let version = r.u16()?;
            let pk_bytes = r.blob()?;
            let public_key = PublicKey::from_bytes(pk_bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
            Control::Hello { version, public_key, config: SessionConfig::read(r)? }
        }
        1 => Control::Accept,
        2 => Control::Refuse { reason: r.string()? },
        3 => {
            let epoch = r.u32()?;
            let mode = if r.u8()? == 0 { Mode::Train } else { Mode::Infer };
            Control::PhaseEnd { epoch, mode }
        }
        4 => Control::Metrics(Metrics { loss_sum: r.f64()?, correct: r.u64()?, count: r.u64()? }),
        5 => Control::Shutdown,
        k => return Err(WireError::Malformed(format!("unknown control kind {k}"))),
    })
}
