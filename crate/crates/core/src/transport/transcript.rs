use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use sha2::{Digest, Sha256};

use super::frame::{Frame, MAX_FRAME_BYTES};
use super::{Channel, TransportError};

#[derive(Debug, Default)]
struct Inner {
    buffer: Option<Vec<u8>>,
    file: Option<BufWriter<File>>,
    hasher: Sha256,
    len: u64,
    frames: u64,
}

/// Every frame seen at one endpoint, in order. Always keeps a running
/// SHA-256; optionally buffers the bytes or streams them to a file.
#[derive(Debug, Clone)]
pub struct Transcript {
    inner: Arc<Mutex<Inner>>,
}

impl Default for Transcript {
    fn default() -> Self {
        Self::new()
    }
}

impl Transcript {
    /// Buffers every frame in memory.
    pub fn new() -> Self {
        Self::with_inner(Inner { buffer: Some(Vec::new()), ..Inner::default() })
    }

    /// Keeps only the digest and counters.
    pub fn hashing() -> Self {
        Self::with_inner(Inner::default())
    }

    /// Streams frames to `path` as they pass.
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = BufWriter::new(File::create(path)?);
        Ok(Self::with_inner(Inner { file: Some(file), ..Inner::default() }))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Self::with_inner(Inner { len: bytes.len() as u64, buffer: Some(bytes), hasher, ..Inner::default() })
    }

    fn with_inner(inner: Inner) -> Self {
        Self { inner: Arc::new(Mutex::new(inner)) }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("transcript lock")
    }

    fn push(&self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = frame.to_bytes();
        let mut inner = self.lock();
        inner.hasher.update(&bytes);
        inner.len += bytes.len() as u64;
        inner.frames += 1;
        if let Some(buf) = inner.buffer.as_mut() {
            buf.extend_from_slice(&bytes);
        }
        if let Some(f) = inner.file.as_mut() {
            f.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Buffered bytes; empty unless created with [`Transcript::new`] or
    /// [`Transcript::from_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.lock().buffer.clone().unwrap_or_default()
    }

    /// Total bytes seen.
    pub fn len(&self) -> u64 {
        self.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_count(&self) -> u64 {
        self.lock().frames
    }

    /// Hex SHA-256 of everything seen so far.
    pub fn sha256_hex(&self) -> String {
        let digest = self.lock().hasher.clone().finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn flush(&self) -> std::io::Result<()> {
        match self.lock().file.as_mut() {
            Some(f) => f.flush(),
            None => Ok(()),
        }
    }

    /// Splits the buffered capture back into frames.
    pub fn frames(&self) -> Result<Vec<Frame>, TransportError> {
        split_frames(&self.to_bytes())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

/// Parses a concatenation of frames, as written to a transcript file.
pub fn split_frames(bytes: &[u8]) -> Result<Vec<Frame>, TransportError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (f, used) = Frame::parse(&bytes[pos..], MAX_FRAME_BYTES)?;
        out.push(f);
        pos += used;
    }
    Ok(out)
}

/// Wraps a channel and appends every frame sent or received to a transcript.
#[derive(Debug)]
pub struct Recording<C> {
    inner: C,
    transcript: Transcript,
}

impl<C: Channel> Recording<C> {
    pub fn new(inner: C, transcript: Transcript) -> Self {
        Self { inner, transcript }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_inner(self) -> C {
        self.inner
    }

    pub fn inner_mut(&mut self) -> &mut C {
        &mut self.inner
    }
}

impl<C: Channel> Channel for Recording<C> {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.inner.send_frame(frame)?;
        self.transcript.push(frame)
    }

    fn recv_frame(&mut self) -> Result<Frame, TransportError> {
        let f = self.inner.recv_frame()?;
        self.transcript.push(&f)?;
        Ok(f)
    }
}
