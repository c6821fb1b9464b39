//! Blocking packet links used by the live bridge and live controller.

use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use crate::transport::{Deadline, TransportError};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("link closed")]
    Closed,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A message-oriented, possibly lossy link carrying CRTP packets.
pub trait PacketLink: Send + Sync {
    fn send(&self, payload: &[u8], deadline: Deadline) -> Result<(), LinkError>;
    /// `Ok(None)` on timeout.
    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError>;
    fn is_open(&self) -> bool;
}

/// Lossless in-process link; deadlines are ignored.
pub struct MemLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl MemLink {
    pub fn pair() -> (MemLink, MemLink) {
        let (a_tx, b_rx) = crossbeam_channel::unbounded();
        let (b_tx, a_rx) = crossbeam_channel::unbounded();
        (MemLink { tx: a_tx, rx: a_rx }, MemLink { tx: b_tx, rx: b_rx })
    }
}

impl PacketLink for MemLink {
    fn send(&self, payload: &[u8], _deadline: Deadline) -> Result<(), LinkError> {
        self.tx.send(payload.to_vec()).map_err(|_| LinkError::Closed)
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError> {
        match self.rx.recv_timeout(timeout) {
            Ok(p) => Ok(Some(p)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Closed),
        }
    }

    fn is_open(&self) -> bool {
        true
    }
}
