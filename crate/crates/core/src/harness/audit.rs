use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::phe::PrivateKey;
use crate::protocol::{Body, Control, DecodeContext, NoiseKind, NoiseRecord, ProtocolMessage, SessionConfig, Tag};
use crate::transport::Frame;

/// A crossing value that is not fully blinded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindingFinding {
    pub frame: usize,
    pub tag: Tag,
    pub id: u64,
    /// Coordinates equal to their unblinded value; `None` when no noise was
    /// recorded for this message at all.
    pub exposed: Option<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatedCiphertext {
    pub first_frame: usize,
    pub second_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub frames: usize,
    /// Crossing tensors whose blinding was checked.
    pub crossing: usize,
    /// False when noise is on but no noise records were supplied.
    pub blinding_verified: bool,
    pub blinding: Vec<BlindingFinding>,
    /// Frames containing private key bytes.
    pub key_material: Vec<usize>,
    pub repeated: Vec<RepeatedCiphertext>,
    /// Frames that do not decode as protocol messages.
    pub undecodable: Vec<usize>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.blinding_verified && self.blinding.is_empty() && self.key_material.is_empty() && self.repeated.is_empty() && self.undecodable.is_empty()
    }

    /// Every frame index named by a failed check, sorted.
    pub fn offending_frames(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .blinding
            .iter()
            .map(|b| b.frame)
            .chain(self.key_material.iter().copied())
            .chain(self.repeated.iter().map(|r| r.second_frame))
            .chain(self.undecodable.iter().copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Byte strings that must never appear on the wire: `λ` and `μ`, in both
/// byte orders.
pub fn key_secrets(sk: &PrivateKey) -> Vec<Vec<u8>> {
    [sk.lambda(), sk.mu()].into_iter().flat_map(|v| [v.to_bytes_be(), v.to_bytes_le()]).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Which noise hides the plaintext inside a crossing message.
fn blinding_kind(tag: Tag) -> Option<NoiseKind> {
    match tag {
        // What the key holder decrypts and what it sends back.
        Tag::NoisyWsum | Tag::DenoisedWsum => Some(NoiseKind::SumBlind),
        Tag::EncWgrad => Some(NoiseKind::GradBlind),
        // What the label holder learns about its weight step.
        Tag::BlindedWgrad => Some(NoiseKind::Weight),
        _ => None,
    }
}

/// Checks a recorded session. `secrets` are byte strings that must not
/// appear in any frame (see [`key_secrets`]); `noise` holds both parties'
/// recorded draws.
pub fn leakage_audit(frames: &[Frame], secrets: &[Vec<u8>], noise: Option<&[NoiseRecord]>) -> Result<AuditReport, HarnessError> {
    let mut report = AuditReport { frames: frames.len(), ..AuditReport::default() };

    for (i, f) in frames.iter().enumerate() {
        if secrets.iter().any(|s| contains(&f.payload, s)) {
            report.key_material.push(i);
        }
    }

    let hello = frames.first().and_then(|f| ProtocolMessage::decode(f.tag, &f.payload, &DecodeContext { public_key: None, operand_bits: 0 }).ok());
    let (pk, config): (_, SessionConfig) = match hello.map(|m| m.body) {
        Some(Body::Control(Control::Hello { public_key, config, .. })) => (public_key, config),
        _ => return Err(HarnessError::Format("transcript does not open with a Hello frame".into())),
    };
    let noise_off = config.noise_blind == 0.0 && config.noise_weight == 0.0;
    report.blinding_verified = noise.is_some() || noise_off;
    let ctx = DecodeContext { public_key: Some(pk), operand_bits: config.operand_bits };

    let mut by_key: HashMap<(u64, NoiseKind), &NoiseRecord> = HashMap::new();
    for r in noise.unwrap_or(&[]) {
        by_key.insert((r.id, r.kind), r);
    }

    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    for (i, f) in frames.iter().enumerate().skip(1) {
        let msg = match ProtocolMessage::decode(f.tag, &f.payload, &ctx) {
            Ok(m) => m,
            Err(_) => {
                report.undecodable.push(i);
                continue;
            }
        };
        for t in msg.body.cipher_tensors() {
            for c in t.raw_values() {
                if let Some(&first) = seen.get(&c.to_bytes_be()) {
                    report.repeated.push(RepeatedCiphertext { first_frame: first, second_frame: i });
                } else {
                    seen.insert(c.to_bytes_be(), i);
                }
            }
        }
        let tag = msg.tag();
        let Some(kind) = blinding_kind(tag) else { continue };
        let total = match &msg.body {
            Body::NoisyWsum { sums } => sums.len(),
            Body::DenoisedWsum { sums } => sums.len(),
            Body::EncWgrad { grad } => grad.len(),
            Body::BlindedWgrad { grad, .. } => grad.len(),
            _ => 0,
        };
        report.crossing += 1;
        let exposed = if noise_off {
            Some(total)
        } else if noise.is_some() {
            match by_key.get(&(msg.id, kind)) {
                Some(r) if r.values.len() == total => Some(r.values.iter().filter(|&&v| v == 0).count()),
                Some(_) => return Err(HarnessError::Format(format!("noise record for batch {} does not match frame {i}", msg.id))),
                None => None,
            }
        } else {
            continue;
        };
        if exposed != Some(0) {
            report.blinding.push(BlindingFinding { frame: i, tag, id: msg.id, exposed, total });
        }
    }
    Ok(report)
}
