use std::io::{ErrorKind, Read, Write};

use super::TransportError;

/// Default cap on a frame payload: 64 MiB.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

/// `[len: u32 BE][tag: u8][payload: len bytes]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: u8, payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn encoded_len(&self) -> usize {
        5 + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.tag);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8], max: usize) -> Result<(Frame, usize), TransportError> {
        if bytes.len() < 5 {
            return Err(TransportError::Truncated { expected: 5, received: bytes.len() });
        }
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if len > max {
            return Err(TransportError::FrameTooLarge { len, max });
        }
        let total = 5 + len;
        if bytes.len() < total {
            return Err(TransportError::Truncated { expected: total, received: bytes.len() });
        }
        Ok((Frame::new(bytes[4], bytes[5..total].to_vec()), total))
    }
}

pub fn check_size(frame: &Frame, max: usize) -> Result<(), TransportError> {
    if frame.payload.len() > max || frame.payload.len() > u32::MAX as usize {
        return Err(TransportError::FrameTooLarge { len: frame.payload.len(), max });
    }
    Ok(())
}

/// Writes a frame in one buffered write. Oversized frames are rejected
/// before anything is written.
pub fn write_frame<W: Write>(w: &mut W, frame: &Frame, max: usize) -> Result<(), TransportError> {
    check_size(frame, max)?;
    w.write_all(&frame.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Fills `buf`, returning how many bytes arrived before end of stream.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, TransportError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Err(TransportError::Timeout),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

/// Reads the next frame. End of stream at a frame boundary is `Closed`;
/// anywhere else it is a truncation error.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Frame, TransportError> {
    let mut header = [0u8; 5];
    match read_full(r, &mut header)? {
        0 => return Err(TransportError::Closed),
        5 => {}
        k => return Err(TransportError::Truncated { expected: 5, received: k }),
    }
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > max {
        return Err(TransportError::FrameTooLarge { len, max });
    }
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got != len {
        return Err(TransportError::Truncated { expected: 5 + len, received: 5 + got });
    }
    Ok(Frame::new(header[4], payload))
}
