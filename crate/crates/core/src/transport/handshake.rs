use super::{Channel, TransportError};
use crate::phe::PublicKey;
use crate::protocol::message::{Body, Control, DecodeContext, ProtocolMessage, SessionConfig};

#[derive(Debug, Clone)]
pub struct HandshakeOutcome {
    pub public_key: PublicKey,
    pub config: SessionConfig,
}

/// Key holder side: offers its public key and configuration.
pub fn initiate_handshake<C: Channel + ?Sized>(ch: &mut C, pk: &PublicKey, config: &SessionConfig) -> Result<(), TransportError> {
    let hello = Control::Hello { version: config.version, public_key: pk.clone(), config: config.clone() };
    ch.send(&ProtocolMessage::new(0, 0, Body::Control(hello)))?;
    let ctx = DecodeContext { public_key: Some(pk.clone()), operand_bits: config.operand_bits };
    match ch.recv(&ctx)?.body {
        Body::Control(Control::Accept) => Ok(()),
        Body::Control(Control::Refuse { reason }) => Err(TransportError::Refused(reason)),
        other => Err(TransportError::Handshake(format!("expected Accept or Refuse, got {}", other.tag().name()))),
    }
}

/// Label holder side: accepts the offer only if it matches `local`.
pub fn accept_handshake<C: Channel + ?Sized>(ch: &mut C, local: &SessionConfig) -> Result<HandshakeOutcome, TransportError> {
    let ctx = DecodeContext { public_key: None, operand_bits: local.operand_bits };
    let msg = ch.recv(&ctx)?;
    let (version, public_key, config) = match msg.body {
        Body::Control(Control::Hello { version, public_key, config }) => (version, public_key, config),
        other => return Err(TransportError::Handshake(format!("expected Hello, got {}", other.tag().name()))),
    };
    let mut problems = config.mismatches(local);
    if version != config.version {
        problems.push(format!("hello version {version} disagrees with config version {}", config.version));
    }
    if problems.is_empty() {
        ch.send(&ProtocolMessage::new(0, 0, Body::Control(Control::Accept)))?;
        Ok(HandshakeOutcome { public_key, config })
    } else {
        let reason = format!("configuration mismatch (offered vs local): {}", problems.join("; "));
        ch.send(&ProtocolMessage::new(0, 0, Body::Control(Control::Refuse { reason: reason.clone() })))?;
        Err(TransportError::Refused(reason))
    }
}
