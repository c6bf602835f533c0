//! Length-prefixed JSON framing, the message schema, and two byte
//! transports (TCP and an in-process pipe) that share the framing code.
//!
//! A frame is a 32-bit big-endian payload length followed by that many bytes
//! of UTF-8 JSON. Payloads are capped at 16 MiB.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Ciphertext, PublicKeyDoc};
use crate::numerics::FixedPointParams;
use crate::store::EncryptedEntry;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    FrameTooLarge(usize),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("connection idle timeout")]
    Timeout,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted => TransportError::ConnectionClosed,
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportError::Timeout,
            _ => TransportError::Io(e),
        }
    }
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, payload: &[u8]) -> Result<(), TransportError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(payload.len()));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

/// A bidirectional byte stream with an optional read deadline.
pub trait Duplex: Read + Write + Send {
    fn set_idle_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

impl Duplex for TcpStream {
    fn set_idle_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.set_read_timeout(timeout)
    }
}

/// One end of an in-process byte pipe. Dropping an end is seen by the peer
/// as end of stream.
pub struct MemoryPipe {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
    timeout: Option<Duration>,
}

pub fn memory_pipe() -> (MemoryPipe, MemoryPipe) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    let end = |tx, rx| MemoryPipe {
        tx,
        rx,
        buf: Vec::new(),
        pos: 0,
        timeout: None,
    };
    (end(tx_a, rx_a), end(tx_b, rx_b))
}

impl Read for MemoryPipe {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        if self.pos == self.buf.len() {
            let next = match self.timeout {
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(chunk) => chunk,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "pipe read timeout"))
                    }
                    Err(RecvTimeoutError::Disconnected) => return Ok(0),
                },
                None => match self.rx.recv() {
                    Ok(chunk) => chunk,
                    Err(_) => return Ok(0),
                },
            };
            self.buf = next;
            self.pos = 0;
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for MemoryPipe {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe peer dropped"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Duplex for MemoryPipe {
    fn set_idle_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

/// Typed frames over any byte stream.
pub struct FramedStream<S> {
    inner: S,
}

pub type Connection = FramedStream<Box<dyn Duplex>>;

impl<S: Read + Write> FramedStream<S> {
    pub fn new(inner: S) -> Self {
        FramedStream { inner }
    }

    pub fn get_mut(&mut self) -> &mut S {
        &mut self.inner
    }

    pub fn send_raw(&mut self, payload: &[u8]) -> Result<(), TransportError> {
        write_frame(&mut self.inner, payload)
    }

    pub fn recv_raw(&mut self) -> Result<Vec<u8>, TransportError> {
        read_frame(&mut self.inner)
    }

    pub fn send<T: Serialize>(&mut self, msg: &T) -> Result<(), TransportError> {
        let payload =
            serde_json::to_vec(msg).map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
        self.send_raw(&payload)
    }

    /// A payload that fails to parse is consumed and reported; the stream
    /// stays usable.
    pub fn recv<T: DeserializeOwned>(&mut self) -> Result<T, TransportError> {
        let payload = self.recv_raw()?;
        let text = std::str::from_utf8(&payload)
            .map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
        serde_json::from_str(text).map_err(|e| TransportError::MalformedPayload(e.to_string()))
    }
}

impl Connection {
    pub fn boxed<S: Duplex + 'static>(stream: S) -> Self {
        FramedStream::new(Box::new(stream))
    }

    pub fn set_idle_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.inner.set_idle_timeout(timeout)?;
        Ok(())
    }
}

/// Every frame on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub user_id: String,
    pub session_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Body {
    #[serde(rename = "ENROLL")]
    Enroll {
        public_key: PublicKeyDoc,
        params: FixedPointParams,
        entries: Vec<EncryptedEntry>,
    },
    #[serde(rename = "ENROLL_ACK")]
    EnrollAck { stored_ciphertexts: u64 },
    #[serde(rename = "AUTH_BEGIN")]
    AuthBegin,
    #[serde(rename = "TEMPLATE_PART")]
    TemplatePart {
        params: FixedPointParams,
        part: u32,
        parts: u32,
        entries: Vec<InvSigmaEntry>,
    },
    #[serde(rename = "KEYSTROKE")]
    Keystroke {
        key_index: u32,
        ciphertext: Ciphertext,
    },
    #[serde(rename = "PPCP_M1")]
    PpcpM1 { ciphertext: Ciphertext },
    #[serde(rename = "PPCP_M2")]
    PpcpM2 {
        bits: Vec<Ciphertext>,
        high: Ciphertext,
    },
    #[serde(rename = "PPCP_M3")]
    PpcpM3 { terms: Vec<Ciphertext> },
    #[serde(rename = "PPCP_M4")]
    PpcpM4 { ciphertext: Ciphertext },
    #[serde(rename = "PPCP_M5")]
    PpcpM5 { ciphertext: Ciphertext },
    #[serde(rename = "PPCP_REVEAL")]
    PpcpReveal { value: i64 },
    #[serde(rename = "DECISION")]
    Decision { key_index: u32, accepted: bool },
    #[serde(rename = "ERROR")]
    Error { code: ErrorCode, message: String },
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Enroll { .. } => "ENROLL",
            Body::EnrollAck { .. } => "ENROLL_ACK",
            Body::AuthBegin => "AUTH_BEGIN",
            Body::TemplatePart { .. } => "TEMPLATE_PART",
            Body::Keystroke { .. } => "KEYSTROKE",
            Body::PpcpM1 { .. } => "PPCP_M1",
            Body::PpcpM2 { .. } => "PPCP_M2",
            Body::PpcpM3 { .. } => "PPCP_M3",
            Body::PpcpM4 { .. } => "PPCP_M4",
            Body::PpcpM5 { .. } => "PPCP_M5",
            Body::PpcpReveal { .. } => "PPCP_REVEAL",
            Body::Decision { .. } => "DECISION",
            Body::Error { .. } => "ERROR",
        }
    }

    /// Ciphertexts carried by this message.
    pub fn ciphertext_count(&self) -> u64 {
        match self {
            Body::Enroll { entries, .. } => 2 * entries.len() as u64,
            Body::TemplatePart { entries, .. } => entries.len() as u64,
            Body::Keystroke { .. }
            | Body::PpcpM1 { .. }
            | Body::PpcpM4 { .. }
            | Body::PpcpM5 { .. } => 1,
            Body::PpcpM2 { bits, .. } => bits.len() as u64 + 1,
            Body::PpcpM3 { terms } => terms.len() as u64,
            _ => 0,
        }
    }
}

/// `E(1/σ_i)` as delivered to the client at session start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvSigmaEntry {
    pub key_index: u32,
    pub inv_sigma: Ciphertext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownUser,
    DuplicateUser,
    InvalidUserId,
    UnknownKeyIndex,
    SessionRejected,
    ParamsMismatch,
    InvalidMessage,
    Internal,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::io::Cursor;

    #[test]
    fn frame_layout_is_big_endian_length_prefix() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(buf, vec![0, 0, 0, 2, b'{', b'}']);
        assert_eq!(read_frame(&mut Cursor::new(buf)).unwrap(), b"{}");
    }

    #[test]
    fn oversized_frames_are_refused() {
        let big = vec![b' '; MAX_FRAME_LEN + 1];
        assert!(matches!(
            write_frame(&mut Vec::new(), &big),
            Err(TransportError::FrameTooLarge(_))
        ));
        let header = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(
            read_frame(&mut Cursor::new(header.to_vec())),
            Err(TransportError::FrameTooLarge(_))
        ));
        let exact = vec![b' '; MAX_FRAME_LEN];
        assert!(write_frame(&mut Vec::new(), &exact).is_ok());
    }

    #[test]
    fn truncated_stream_is_connection_closed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        buf.truncate(6);
        assert!(matches!(
            read_frame(&mut Cursor::new(buf)),
            Err(TransportError::ConnectionClosed)
        ));
        assert!(matches!(
            read_frame(&mut Cursor::new(Vec::new())),
            Err(TransportError::ConnectionClosed)
        ));
    }

    #[test]
    fn malformed_json_leaves_stream_usable() {
        let (a, b) = memory_pipe();
        let mut a = FramedStream::new(a);
        let mut b = FramedStream::new(b);
        a.send_raw(b"{not json").unwrap();
        a.send(&Envelope {
            user_id: "u".into(),
            session_id: "s".into(),
            seq: 1,
            body: Body::AuthBegin,
        })
        .unwrap();
        assert!(matches!(
            b.recv::<Envelope>(),
            Err(TransportError::MalformedPayload(_))
        ));
        assert_eq!(b.recv::<Envelope>().unwrap().body, Body::AuthBegin);
    }

    #[test]
    fn memory_pipe_round_trip_is_byte_identical() {
        let (a, b) = memory_pipe();
        let mut a = FramedStream::new(a);
        let mut b = FramedStream::new(b);
        let payload = br#"{"type":"AUTH_BEGIN","user_id":"alice","session_id":"","seq":0}"#;
        a.send_raw(payload).unwrap();
        assert_eq!(b.recv_raw().unwrap(), payload);
        drop(a);
        assert!(matches!(b.recv_raw(), Err(TransportError::ConnectionClosed)));
    }

    #[test]
    fn memory_pipe_timeout() {
        let (_a, mut b) = memory_pipe();
        b.set_idle_timeout(Some(Duration::from_millis(20))).unwrap();
        let mut b = FramedStream::new(b);
        assert!(matches!(b.recv_raw(), Err(TransportError::Timeout)));
    }

    #[test]
    fn envelope_wire_form() {
        let (pk, _) = keygen(512, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let c = pk.encrypt_i64(5, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        let env = Envelope {
            user_id: "alice".into(),
            session_id: "s-1".into(),
            seq: 7,
            body: Body::Keystroke {
                key_index: 3,
                ciphertext: c,
            },
        };
        let v = serde_json::to_value(&env).unwrap();
        assert_eq!(v["type"], "KEYSTROKE");
        assert_eq!(v["user_id"], "alice");
        assert_eq!(v["seq"], 7);
        assert_eq!(v["key_index"], 3);
        assert!(v["ciphertext"]["value"].is_string());
        let back: Envelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, env);
        let m1 = serde_json::to_value(Envelope {
            body: Body::PpcpReveal { value: 1 },
            ..env
        })
        .unwrap();
        assert_eq!(m1["type"], "PPCP_REVEAL");
    }

    #[test]
    fn every_type_name_matches_serialized_tag() {
        let (pk, _) = keygen(512, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let c = pk.encrypt_i64(5, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        let bodies = vec![
            Body::Enroll {
                public_key: pk.to_doc(),
                params: FixedPointParams::default(),
                entries: vec![],
            },
            Body::EnrollAck { stored_ciphertexts: 0 },
            Body::AuthBegin,
            Body::TemplatePart {
                params: FixedPointParams::default(),
                part: 0,
                parts: 1,
                entries: vec![],
            },
            Body::Keystroke {
                key_index: 0,
                ciphertext: c.clone(),
            },
            Body::PpcpM1 { ciphertext: c.clone() },
            Body::PpcpM2 {
                bits: vec![c.clone()],
                high: c.clone(),
            },
            Body::PpcpM3 { terms: vec![] },
            Body::PpcpM4 { ciphertext: c.clone() },
            Body::PpcpM5 { ciphertext: c },
            Body::PpcpReveal { value: 0 },
            Body::Decision {
                key_index: 0,
                accepted: true,
            },
            Body::Error {
                code: ErrorCode::Internal,
                message: String::new(),
            },
        ];
        for body in bodies {
            let v = serde_json::to_value(&body).unwrap();
            assert_eq!(v["type"], body.type_name());
        }
    }
}
