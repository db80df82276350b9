//! Message delivery between the two parties: an in-process duplex channel
//! and length-prefixed frames over TCP, sharing one framing layer.

mod frame;
mod handshake;
mod inproc;
mod tcp;
mod transcript;

use std::time::Duration;

use thiserror::Error;

use crate::protocol::message::{DecodeContext, MessageError, ProtocolMessage};

pub use frame::{read_frame, write_frame, Frame, MAX_FRAME_BYTES};
pub use handshake::{accept_handshake, initiate_handshake, HandshakeOutcome};
pub use inproc::{duplex, InProcess};
pub use tcp::TcpChannel;
pub use transcript::{split_frames, Recording, Transcript};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("frame payload of {len} bytes exceeds the {max}-byte cap")]
    FrameTooLarge { len: usize, max: usize },
    #[error("malformed frame: expected {expected} bytes, received {received}")]
    Truncated { expected: usize, received: usize },
    #[error("peer closed the connection")]
    Closed,
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("handshake refused: {0}")]
    Refused(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An ordered, reliable, framed duplex link to exactly one peer.
pub trait Channel: Send {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError>;

    fn recv_frame(&mut self) -> Result<Frame, TransportError>;

    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError> {
        self.send_frame(&Frame::new(msg.tag() as u8, msg.encode_payload()))
    }

    fn recv(&mut self, ctx: &DecodeContext) -> Result<ProtocolMessage, TransportError> {
        let frame = self.recv_frame()?;
        Ok(ProtocolMessage::decode(frame.tag, &frame.payload, ctx)?)
    }
}

impl<C: Channel + ?Sized> Channel for Box<C> {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        (**self).send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Frame, TransportError> {
        (**self).recv_frame()
    }
}

#[cfg(test)]
mod tests;
