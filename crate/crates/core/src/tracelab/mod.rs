//! Latency analytics: inter-packet times, round-trip times, CDFs and
//! per-stage decomposition of request traces.
//!
//! All durations are integer microseconds.

mod export;
mod stats;

use std::collections::BTreeMap;

use crate::clock::Instant;
use crate::crtp::CrtpPacket;

pub use export::{
    read_traces, write_cdf, write_stage_stats, write_traces, ExportError, CDF_HEADER, STAGE_STATS_HEADER,
};
pub use stats::{
    boxstats, cdf, end_to_end, ipt, quantile, rtt, stage_decompose, CdfSeries, StageIntervals, StageStats,
    TracelabError, INTERVAL_NAMES,
};

/// Trace points in the order a loss-free request passes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    ControllerSend,
    TransportTx,
    BridgeIn,
    SerialTx,
    DroneRx,
    DroneTx,
    SerialRx,
    BridgeOut,
    TransportRx,
    ControllerRecv,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::ControllerSend,
        Stage::TransportTx,
        Stage::BridgeIn,
        Stage::SerialTx,
        Stage::DroneRx,
        Stage::DroneTx,
        Stage::SerialRx,
        Stage::BridgeOut,
        Stage::TransportRx,
        Stage::ControllerRecv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ControllerSend => "controller_send",
            Stage::TransportTx => "transport_tx",
            Stage::BridgeIn => "bridge_in",
            Stage::SerialTx => "serial_tx",
            Stage::DroneRx => "drone_rx",
            Stage::DroneTx => "drone_tx",
            Stage::SerialRx => "serial_rx",
            Stage::BridgeOut => "bridge_out",
            Stage::TransportRx => "transport_rx",
            Stage::ControllerRecv => "controller_recv",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Stage timestamps of one request token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceRecord {
    pub token: u32,
    stamps: [Option<Instant>; 10],
}

impl TraceRecord {
    pub fn new(token: u32) -> Self {
        TraceRecord {
            token,
            stamps: [None; 10],
        }
    }

    pub fn get(&self, stage: Stage) -> Option<Instant> {
        self.stamps[stage.index()]
    }

    pub fn set(&mut self, stage: Stage, at: Instant) {
        self.stamps[stage.index()] = Some(at);
    }

    /// Builder form of [`TraceRecord::set`].
    pub fn with(mut self, stage: Stage, at: Instant) -> Self {
        self.set(stage, at);
        self
    }

    /// Records `at` unless the stage already has a timestamp.
    pub fn record_first(&mut self, stage: Stage, at: Instant) {
        self.stamps[stage.index()].get_or_insert(at);
    }
}

/// Receives trace points from the components a packet passes through.
pub trait TraceSink {
    /// `crtp` is the CRTP packet as seen at that point.
    fn record(&mut self, stage: Stage, crtp: &[u8], at: Instant);
}

/// Discards everything.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _stage: Stage, _crtp: &[u8], _at: Instant) {}
}

/// Collects request traces keyed by run token.
///
/// Packets carry only the low byte of the token; [`TraceCollector::begin_request`]
/// maps it to the run token. At most one request is in flight at a time, so
/// the mapping is unambiguous. The first timestamp for each stage wins, so a
/// resent request keeps the times of its first copy. Setpoints are ignored.
#[derive(Debug, Default)]
pub struct TraceCollector {
    traces: BTreeMap<u32, TraceRecord>,
    by_wire: BTreeMap<u8, u32>,
}

impl TraceCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_request(&mut self, token: u32) {
        self.by_wire.insert(token as u8, token);
        self.traces.entry(token).or_insert_with(|| TraceRecord::new(token));
    }

    pub fn record_token(&mut self, token: u32, stage: Stage, at: Instant) {
        self.traces
            .entry(token)
            .or_insert_with(|| TraceRecord::new(token))
            .record_first(stage, at);
    }

    pub fn traces(&self) -> impl Iterator<Item = &TraceRecord> {
        self.traces.values()
    }

    pub fn into_traces(self) -> Vec<TraceRecord> {
        self.traces.into_values().collect()
    }
}

impl TraceSink for TraceCollector {
    fn record(&mut self, stage: Stage, crtp: &[u8], at: Instant) {
        let Ok(packet) = CrtpPacket::decode(crtp) else {
            return;
        };
        let Some(wire) = packet.token() else {
            return;
        };
        if let Some(&token) = self.by_wire.get(&wire) {
            self.record_token(token, stage, at);
        }
    }
}

/// A trace point crossing a thread boundary in live mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub stage: Stage,
    pub crtp: Vec<u8>,
    pub at: Instant,
}

/// Forwards trace points over a channel; used by live components.
pub struct ChannelSink(pub crossbeam_channel::Sender<TraceEvent>);

impl TraceSink for ChannelSink {
    fn record(&mut self, stage: Stage, crtp: &[u8], at: Instant) {
        // a dropped receiver only means nobody is collecting
        let _ = self.0.send(TraceEvent {
            stage,
            crtp: crtp.to_vec(),
            at,
        });
    }
}
