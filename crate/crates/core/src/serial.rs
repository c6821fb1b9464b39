//! Sync-byte framing for the UART leg between bridge and flight controller.
//!
//! ```text
//! +------+------+------+-----+-------------+----+----+
//! | 0xBC | 0xCF | type | len | payload ... | c0 | c1 |
//! +------+------+------+-----+-------------+----+----+
//! ```
//!
//! `c0, c1` is a Fletcher-8 checksum over `type`, `len` and the payload.
//! Frame type 0x00 carries one CRTP packet; other types are reserved.

use std::collections::VecDeque;
use std::io;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Instant;

pub const SYNC: [u8; 2] = [0xBC, 0xCF];
pub const MAX_FRAME_PAYLOAD: usize = 32;
pub const FRAME_OVERHEAD: usize = 6;
pub const FRAME_TYPE_CRTP: u8 = 0x00;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerialError {
    #[error("frame payload of {0} bytes exceeds 32")]
    Oversize(usize),
}

pub fn fletcher8(bytes: &[u8]) -> (u8, u8) {
    let (mut c0, mut c1) = (0u16, 0u16);
    for &b in bytes {
        c0 = (c0 + b as u16) % 255;
        c1 = (c1 + c0) % 255;
    }
    (c0 as u8, c1 as u8)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialFrame {
    pub frame_type: u8,
    payload: Vec<u8>,
}

impl SerialFrame {
    pub fn new(frame_type: u8, payload: Vec<u8>) -> Result<Self, SerialError> {
        if payload.len() > MAX_FRAME_PAYLOAD {
            return Err(SerialError::Oversize(payload.len()));
        }
        Ok(SerialFrame {
            frame_type,
            payload,
        })
    }

    pub fn crtp(crtp_bytes: Vec<u8>) -> Result<Self, SerialError> {
        Self::new(FRAME_TYPE_CRTP, crtp_bytes)
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }

    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }
}

pub fn frame_encode(frame: &SerialFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(&SYNC);
    out.push(frame.frame_type);
    out.push(frame.payload.len() as u8);
    out.extend_from_slice(&frame.payload);
    let (c0, c1) = fletcher8(&out[2..]);
    out.push(c0);
    out.push(c1);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodeOutcome {
    pub frames: Vec<SerialFrame>,
    pub remainder: Vec<u8>,
    pub errors_skipped: usize,
}

enum Candidate {
    Valid(SerialFrame, usize),
    Invalid,
    Incomplete,
}

fn candidate_at(buf: &[u8], at: usize) -> Candidate {
    let rest = &buf[at..];
    if rest.len() < 2 {
        // a lone trailing 0xBC may still become a sync pair
        return if rest.first().is_none_or(|&b| b == SYNC[0]) {
            Candidate::Incomplete
        } else {
            Candidate::Invalid
        };
    }
    if rest[..2] != SYNC {
        return Candidate::Invalid;
    }
    if rest.len() < 4 {
        return Candidate::Incomplete;
    }
    let len = rest[3] as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Candidate::Invalid;
    }
    let total = FRAME_OVERHEAD + len;
    if rest.len() < total {
        return Candidate::Incomplete;
    }
    let (c0, c1) = fletcher8(&rest[2..4 + len]);
    if rest[4 + len] != c0 || rest[5 + len] != c1 {
        return Candidate::Invalid;
    }
    let frame = SerialFrame {
        frame_type: rest[2],
        payload: rest[4..4 + len].to_vec(),
    };
    Candidate::Valid(frame, total)
}

fn complete_frame_after(buf: &[u8], from: usize) -> bool {
    (from..buf.len()).any(|i| matches!(candidate_at(buf, i), Candidate::Valid(..)))
}

/// Extracts every complete frame from `buffer`.
///
/// Bytes that cannot start a valid frame are discarded one at a time and
/// counted in `errors_skipped`. An incomplete candidate at the tail is
/// returned as `remainder`, unless a complete valid frame follows it, in
/// which case the candidate is treated as garbage.
pub fn frame_decode(buffer: &[u8]) -> DecodeOutcome {
    let mut out = DecodeOutcome::default();
    let mut at = 0;
    while at < buffer.len() {
        match candidate_at(buffer, at) {
            Candidate::Valid(frame, len) => {
                out.frames.push(frame);
                at += len;
            }
            Candidate::Invalid => {
                out.errors_skipped += 1;
                at += 1;
            }
            Candidate::Incomplete => {
                if complete_frame_after(buffer, at + 1) {
                    out.errors_skipped += 1;
                    at += 1;
                } else {
                    out.remainder = buffer[at..].to_vec();
                    break;
                }
            }
        }
    }
    out
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    pending: Vec<u8>,
    skipped: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<SerialFrame> {
        self.pending.extend_from_slice(bytes);
        let outcome = frame_decode(&self.pending);
        self.skipped += outcome.errors_skipped as u64;
        self.pending = outcome.remainder;
        outcome.frames
    }

    pub fn bytes_skipped(&self) -> u64 {
        self.skipped
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireConfig {
    pub baud: u32,
    pub per_byte_overhead_bits: u32,
    /// Fixed per-direction latency added by the host-side driver.
    pub extra_driver_latency_ms: f64,
    /// Mean of an exponential tail added on top of the fixed driver latency.
    /// Zero disables it.
    pub driver_latency_tail_ms: f64,
    pub seed: u64,
}

impl Default for WireConfig {
    fn default() -> Self {
        WireConfig {
            baud: 1_000_000,
            per_byte_overhead_bits: 10,
            extra_driver_latency_ms: 0.0,
            driver_latency_tail_ms: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireConfigError {
    #[error("baud must be > 0")]
    Baud,
    #[error("per_byte_overhead_bits must be > 0")]
    Overhead,
    #[error("extra_driver_latency_ms must be finite and >= 0, got {0}")]
    Latency(f64),
    #[error("driver_latency_tail_ms must be finite and >= 0, got {0}")]
    Tail(f64),
}

impl WireConfig {
    pub fn validate(&self) -> Result<(), WireConfigError> {
        if self.baud == 0 {
            return Err(WireConfigError::Baud);
        }
        if self.per_byte_overhead_bits == 0 {
            return Err(WireConfigError::Overhead);
        }
        if !(self.extra_driver_latency_ms.is_finite() && self.extra_driver_latency_ms >= 0.0) {
            return Err(WireConfigError::Latency(self.extra_driver_latency_ms));
        }
        if !(self.driver_latency_tail_ms.is_finite() && self.driver_latency_tail_ms >= 0.0) {
            return Err(WireConfigError::Tail(self.driver_latency_tail_ms));
        }
        Ok(())
    }

    fn serialization_ns(&self, frame_bytes: usize) -> u64 {
        frame_bytes as u64 * self.per_byte_overhead_bits as u64 * 1_000_000_000 / self.baud as u64
    }
}

/// Serialization time of `frame_bytes` plus the fixed driver latency.
pub fn transfer_time(cfg: &WireConfig, frame_bytes: usize) -> Duration {
    Duration::from_nanos(cfg.serialization_ns(frame_bytes))
        + Duration::from_secs_f64(cfg.extra_driver_latency_ms / 1000.0)
}

/// One direction of the simulated UART.
///
/// Frames serialize back to back; the driver latency is applied after the
/// bytes leave the wire. Arrivals never overtake each other.
pub struct WirePipe {
    cfg: WireConfig,
    rng: ChaCha8Rng,
    tail: Option<Exp<f64>>,
    busy_until_ns: u64,
    last_arrival: Instant,
    bytes_sent: u64,
}

impl WirePipe {
    pub fn new(cfg: WireConfig) -> Result<Self, WireConfigError> {
        cfg.validate()?;
        let tail = (cfg.driver_latency_tail_ms > 0.0)
            .then(|| Exp::new(1.0 / (cfg.driver_latency_tail_ms * 1000.0)).expect("positive rate"));
        Ok(WirePipe {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            tail,
            busy_until_ns: 0,
            last_arrival: Instant::ZERO,
            bytes_sent: 0,
        })
    }

    /// Starts transmitting `frame_bytes` at `now` (or when the wire frees up)
    /// and returns the instant the far end has the whole frame.
    pub fn transmit(&mut self, now: Instant, frame_bytes: usize) -> Instant {
        let start_ns = (now.as_micros() * 1000).max(self.busy_until_ns);
        let done_ns = start_ns + self.cfg.serialization_ns(frame_bytes);
        self.busy_until_ns = done_ns;
        self.bytes_sent += frame_bytes as u64;
        let mut latency_us = self.cfg.extra_driver_latency_ms * 1000.0;
        if let Some(tail) = &self.tail {
            latency_us += tail.sample(&mut self.rng);
        }
        let arrival_us = done_ns.div_ceil(1000) + latency_us.round() as u64;
        let arrival = Instant::from_micros(arrival_us).max(self.last_arrival);
        self.last_arrival = arrival;
        arrival
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }
}

/// In-memory full-duplex byte pipe implementing `Read`/`Write`, for running
/// the live bridge against a simulated device.
pub struct MemSerial {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: VecDeque<u8>,
    read_timeout: Duration,
}

impl MemSerial {
    /// Two connected ends.
    pub fn pair(read_timeout: Duration) -> (MemSerial, MemSerial) {
        let (a_tx, b_rx) = crossbeam_channel::unbounded();
        let (b_tx, a_rx) = crossbeam_channel::unbounded();
        (
            MemSerial {
                tx: a_tx,
                rx: a_rx,
                pending: VecDeque::new(),
                read_timeout,
            },
            MemSerial {
                tx: b_tx,
                rx: b_rx,
                pending: VecDeque::new(),
                read_timeout,
            },
        )
    }

    /// Independent handle sharing the same pipe ends.
    pub fn try_clone(&self) -> MemSerial {
        MemSerial {
            tx: self.tx.clone(),
            rx: self.rx.clone(),
            pending: VecDeque::new(),
            read_timeout: self.read_timeout,
        }
    }
}

impl io::Read for MemSerial {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pending.is_empty() {
            match self.rx.recv_timeout(self.read_timeout) {
                Ok(chunk) => self.pending.extend(chunk),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "serial read timeout"))
                }
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        for (slot, b) in buf.iter_mut().zip(self.pending.drain(..n)) {
            *slot = b;
        }
        Ok(n)
    }
}

impl io::Write for MemSerial {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "serial peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}
