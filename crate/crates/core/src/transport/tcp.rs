use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::frame::{read_frame, write_frame, Frame, MAX_FRAME_BYTES};
use super::{Channel, TransportError, DEFAULT_TIMEOUT};

/// Framed messages over a TCP stream.
#[derive(Debug)]
pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
    max_frame: usize,
}

impl TcpChannel {
    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        let peer = stream.peer_addr()?;
        let reader = BufReader::with_capacity(1 << 16, stream.try_clone()?);
        let writer = BufWriter::with_capacity(1 << 16, stream);
        Ok(Self { reader, writer, peer, max_frame: MAX_FRAME_BYTES })
    }

    /// Connects, retrying until `wait` elapses.
    pub fn connect<A: ToSocketAddrs>(addr: A, wait: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + wait;
        loop {
            let mut last = None;
            for a in &addrs {
                match TcpStream::connect_timeout(a, Duration::from_secs(2)) {
                    Ok(s) => return Self::from_stream(s, DEFAULT_TIMEOUT),
                    Err(e) => last = Some(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(last.map(TransportError::Io).unwrap_or(TransportError::Closed));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
    }

    /// Accepts exactly one peer on `listener`.
    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream, DEFAULT_TIMEOUT)
    }

    pub fn with_max_frame(mut self, max: usize) -> Self {
        self.max_frame = max;
        self
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }
}

impl Channel for TcpChannel {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, frame, self.max_frame)
    }

    fn recv_frame(&mut self) -> Result<Frame, TransportError> {
        read_frame(&mut self.reader, self.max_frame)
    }
}
