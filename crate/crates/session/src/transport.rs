//! Byte-stream transports carrying protocol frames between the parties.
//!
//! The contract is a reliable, ordered, bidirectional stream; frames are
//! self-delimiting (see [`crate::wire`]), so transports only move bytes.
//! Authentication of the classical channel is assumed ideal and is out of
//! scope.

use crate::wire::MAX_PAYLOAD;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

pub trait Transport {
    /// Sends one complete frame.
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Blocks until one complete frame arrives and returns its bytes.
    fn recv_frame(&mut self) -> io::Result<Vec<u8>>;
}

/// One endpoint of an in-memory duplex pipe; frames cross whole.
pub struct MemoryDuplex {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl MemoryDuplex {
    /// Creates a connected endpoint pair.
    pub fn pair() -> (MemoryDuplex, MemoryDuplex) {
        let (atx, brx) = channel();
        let (btx, arx) = channel();
        (
            MemoryDuplex { tx: atx, rx: arx },
            MemoryDuplex { tx: btx, rx: brx },
        )
    }
}

impl Transport for MemoryDuplex {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer hung up"))
    }

    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| io::Error::new(io::ErrorKind::UnexpectedEof, "peer hung up"))
    }
}

/// Frame transport over any ordered byte stream (used with [`TcpStream`]
/// for the two-process mode).
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

pub type TcpTransport = StreamTransport<TcpStream>;

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.stream.write_all(frame)?;
        self.stream.flush()
    }

    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        let mut header = [0u8; 5];
        self.stream.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header[1..5].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame payload {len} exceeds limit"),
            ));
        }
        let mut frame = vec![0u8; 5 + len as usize];
        frame[..5].copy_from_slice(&header);
        self.stream.read_exact(&mut frame[5..])?;
        Ok(frame)
    }
}
