use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::frame::{check_size, Frame, MAX_FRAME_BYTES};
use super::{Channel, TransportError, DEFAULT_TIMEOUT};

/// One end of an in-memory duplex link. Frames travel as encoded bytes so
/// both transports see identical data.
#[derive(Debug)]
pub struct InProcess {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    max_frame: usize,
}

/// A connected pair of endpoints.
pub fn duplex() -> (InProcess, InProcess) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    let mk = |tx, rx| InProcess { tx, rx, timeout: DEFAULT_TIMEOUT, max_frame: MAX_FRAME_BYTES };
    (mk(tx_a, rx_a), mk(tx_b, rx_b))
}

impl InProcess {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_frame(mut self, max: usize) -> Self {
        self.max_frame = max;
        self
    }

    /// Discards frames already delivered but not yet received.
    pub fn drain(&mut self) -> usize {
        self.rx.try_iter().count()
    }
}

impl Channel for InProcess {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        check_size(frame, self.max_frame)?;
        self.tx.send(frame.to_bytes()).map_err(|_| TransportError::Closed)
    }

    fn recv_frame(&mut self) -> Result<Frame, TransportError> {
        let bytes = match self.rx.recv_timeout(self.timeout) {
            Ok(b) => b,
            Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
        };
        let (frame, used) = Frame::parse(&bytes, self.max_frame)?;
        debug_assert_eq!(used, bytes.len());
        Ok(frame)
    }
}
