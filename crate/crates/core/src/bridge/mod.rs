//! Relay between the transport endpoint and the serial link.
//!
//! Two independent flows: uplink (transport to serial) and downlink (serial
//! to transport). Each flow is a bounded FIFO served by one worker that
//! spends `per_packet_processing_ms` on every packet. A full queue drops the
//! newest arrival. Packets are only length-checked, never parsed.
//!
//! [`BridgeCore`] is the event-driven form used in virtual time;
//! [`run_bridge`] runs the same contract on threads.

mod live;

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Instant;
use crate::crtp::MAX_ENCODED;
use crate::tracelab::{Stage, TraceSink};
use crate::transport::Deadline;

pub use live::{run_bridge, BridgeError, BridgeHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    /// Deadline stamped on downlink transport sends; `None` for no deadline.
    pub downstream_default_deadline_ms: Option<u64>,
    /// Packets a flow holds, including the one being processed.
    pub queue_capacity: usize,
    pub per_packet_processing_ms: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            downstream_default_deadline_ms: Some(100),
            queue_capacity: 64,
            per_packet_processing_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeConfigError {
    #[error("queue_capacity must be >= 1")]
    Capacity,
    #[error("per_packet_processing_ms must be finite and >= 0, got {0}")]
    Processing(f64),
    #[error("downstream_default_deadline_ms must be in 1..=65534")]
    Deadline,
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeConfigError> {
        if self.queue_capacity == 0 {
            return Err(BridgeConfigError::Capacity);
        }
        if !(self.per_packet_processing_ms.is_finite() && self.per_packet_processing_ms >= 0.0) {
            return Err(BridgeConfigError::Processing(self.per_packet_processing_ms));
        }
        if matches!(self.downstream_default_deadline_ms, Some(0) | Some(65_535..)) {
            return Err(BridgeConfigError::Deadline);
        }
        Ok(())
    }

    pub fn downstream_deadline(&self) -> Deadline {
        self.downstream_default_deadline_ms.into()
    }

    /// Processing time rounded to whole microseconds.
    pub fn processing(&self) -> Duration {
        Duration::from_micros((self.per_packet_processing_ms * 1000.0).round() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flow {
    /// Transport to serial.
    Uplink,
    /// Serial to transport.
    Downlink,
}

impl Flow {
    fn entry_stage(self) -> Stage {
        match self {
            Flow::Uplink => Stage::BridgeIn,
            Flow::Downlink => Stage::SerialRx,
        }
    }

    fn exit_stage(self) -> Stage {
        match self {
            Flow::Uplink => Stage::SerialTx,
            Flow::Downlink => Stage::BridgeOut,
        }
    }
}

/// Per-flow counters. `entered = forwarded + dropped_queue_full +
/// decode_errors + in_queue` at all times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlowStats {
    pub entered: u64,
    pub forwarded: u64,
    pub dropped_queue_full: u64,
    pub decode_errors: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BridgeStats {
    pub uplink: FlowStats,
    pub downlink: FlowStats,
}

impl BridgeStats {
    pub fn uplink_forwarded(&self) -> u64 {
        self.uplink.forwarded
    }

    pub fn downlink_forwarded(&self) -> u64 {
        self.downlink.forwarded
    }

    pub fn dropped_queue_full(&self) -> u64 {
        self.uplink.dropped_queue_full + self.downlink.dropped_queue_full
    }

    pub fn decode_errors(&self) -> u64 {
        self.uplink.decode_errors + self.downlink.decode_errors
    }
}

/// Whether `crtp` has a length a CRTP packet can have.
pub fn valid_length(crtp: &[u8]) -> bool {
    (1..=MAX_ENCODED).contains(&crtp.len())
}

#[derive(Default)]
struct FlowQueue {
    queue: VecDeque<Vec<u8>>,
    stats: FlowStats,
}

/// Bridge flows as a pure state machine. The caller schedules the returned
/// completion instants and calls [`BridgeCore::complete`] at each.
pub struct BridgeCore {
    cfg: BridgeConfig,
    up: FlowQueue,
    down: FlowQueue,
}

impl BridgeCore {
    pub fn new(cfg: BridgeConfig) -> Result<Self, BridgeConfigError> {
        cfg.validate()?;
        Ok(BridgeCore {
            cfg,
            up: FlowQueue::default(),
            down: FlowQueue::default(),
        })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    fn flow(&mut self, flow: Flow) -> &mut FlowQueue {
        match flow {
            Flow::Uplink => &mut self.up,
            Flow::Downlink => &mut self.down,
        }
    }

    pub fn queued(&self, flow: Flow) -> usize {
        match flow {
            Flow::Uplink => self.up.queue.len(),
            Flow::Downlink => self.down.queue.len(),
        }
    }

    pub fn stats(&self) -> BridgeStats {
        BridgeStats {
            uplink: self.up.stats,
            downlink: self.down.stats,
        }
    }

    /// Accepts a packet into `flow`. Returns the instant its processing
    /// completes if the worker was idle.
    pub fn offer(&mut self, flow: Flow, now: Instant, crtp: &[u8], sink: &mut dyn TraceSink) -> Option<Instant> {
        let cap = self.cfg.queue_capacity;
        let processing = self.cfg.processing();
        let q = self.flow(flow);
        q.stats.entered += 1;
        if !valid_length(crtp) {
            q.stats.decode_errors += 1;
            return None;
        }
        if q.queue.len() >= cap {
            q.stats.dropped_queue_full += 1;
            return None;
        }
        sink.record(flow.entry_stage(), crtp, now);
        q.queue.push_back(crtp.to_vec());
        (q.queue.len() == 1).then(|| now + processing)
    }

    /// Finishes the packet at the head of `flow`. Returns its bytes and, if
    /// another packet is waiting, when that one completes.
    pub fn complete(&mut self, flow: Flow, now: Instant, sink: &mut dyn TraceSink) -> Option<(Vec<u8>, Option<Instant>)> {
        let processing = self.cfg.processing();
        let q = self.flow(flow);
        let bytes = q.queue.pop_front()?;
        q.stats.forwarded += 1;
        sink.record(flow.exit_stage(), &bytes, now);
        let next = (!q.queue.is_empty()).then(|| now + processing);
        Some((bytes, next))
    }
}
