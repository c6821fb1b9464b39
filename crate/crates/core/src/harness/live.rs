//! Real-time run on one host: two UDP transport endpoints over loopback, the
//! threaded bridge and a drone thread behind an in-memory serial pipe.
//!
//! The channel section of the scenario is not applied; datagrams see
//! whatever the loopback interface does.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::{io_err, HarnessError, PathKind, Percentiles, ScenarioConfig, PACKET_LOG_FILE, SUMMARY_FILE, TRACES_FILE};
use crate::bridge::{run_bridge, BridgeStats};
use crate::clock::{Instant, SystemClock};
use crate::controller::{run_workload, write_packet_log, Direction, PacketLogRecord};
use crate::crtp::{CrtpPacket, PacketKind};
use crate::drone::{spawn_drone, DroneStats};
use crate::serial::MemSerial;
use crate::tracelab::{rtt, write_traces, ChannelSink, Stage, TraceEvent, TraceRecord};
use crate::transport::{TransportStats, UdpEndpoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveSummary {
    pub scenario: String,
    pub run_id: String,
    pub mode: &'static str,
    pub requests_configured: u32,
    pub requests_answered: usize,
    pub controller_error: Option<String>,
    pub link_error: Option<String>,
    pub rtt: Option<Percentiles>,
    pub controller_transport: TransportStats,
    pub bridge_transport: TransportStats,
    pub bridge: BridgeStats,
    pub drone: DroneStats,
}

#[derive(Debug)]
pub struct LiveReport {
    pub summary: LiveSummary,
    pub log: Vec<PacketLogRecord>,
    pub traces: Vec<TraceRecord>,
}

fn loopback_socket() -> Result<(UdpSocket, SocketAddr), HarnessError> {
    let local: SocketAddr = ([127, 0, 0, 1], 0).into();
    let socket = UdpSocket::bind(local).map_err(io_err(Path::new("127.0.0.1:0")))?;
    let addr = socket.local_addr().map_err(io_err(Path::new("127.0.0.1:0")))?;
    Ok((socket, addr))
}

fn link_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Usage(format!("live link setup failed: {e}"))
}

/// Builds request traces from the packet log plus the bridge and drone
/// trace events. An event belongs to the latest request whose token has
/// the same low byte and whose first transmission precedes the event.
pub fn assemble_live_traces(log: &[PacketLogRecord], events: &[TraceEvent]) -> Vec<TraceRecord> {
    let mut traces: BTreeMap<u32, TraceRecord> = BTreeMap::new();
    let mut first_out: Vec<(Instant, u32)> = Vec::new();
    for r in log {
        let Some(token) = r.token else { continue };
        let t = traces.entry(token).or_insert_with(|| TraceRecord::new(token));
        match (r.kind, r.direction) {
            (PacketKind::Request, Direction::Out) => {
                if t.get(Stage::ControllerSend).is_none() {
                    first_out.push((r.timestamp, token));
                }
                t.record_first(Stage::ControllerSend, r.timestamp);
            }
            (PacketKind::Response, Direction::In) => t.record_first(Stage::ControllerRecv, r.timestamp),
            _ => {}
        }
    }
    for e in events {
        let Some(wire) = CrtpPacket::decode(&e.crtp).ok().and_then(|p| p.token()) else {
            continue;
        };
        let owner = first_out
            .iter()
            .rev()
            .find(|(sent, token)| *token as u8 == wire && *sent <= e.at)
            .map(|(_, token)| *token);
        if let Some(token) = owner {
            traces.get_mut(&token).expect("token seen in log").record_first(e.stage, e.at);
        }
    }
    traces.into_values().collect()
}

pub fn run_live(cfg: &ScenarioConfig, out: &Path) -> Result<LiveReport, HarnessError> {
    cfg.validate()?;
    if cfg.path != PathKind::Prrt {
        return Err(HarnessError::Usage("live mode needs a scenario with path = \"prrt\"".into()));
    }
    let clock = SystemClock::new();
    let (s1, a1) = loopback_socket()?;
    let (s2, a2) = loopback_socket()?;
    let controller_end = UdpEndpoint::with_socket(s1, a2, cfg.transport.clone(), cfg.expiry_mode, clock).map_err(link_err)?;
    let bridge_end =
        Arc::new(UdpEndpoint::with_socket(s2, a1, cfg.transport.clone(), cfg.expiry_mode, clock).map_err(link_err)?);
    let (bridge_serial, drone_serial) = MemSerial::pair(Duration::from_millis(10));
    let (trace_tx, trace_rx) = crossbeam_channel::unbounded();

    let mut drone = spawn_drone(
        drone_serial.try_clone(),
        drone_serial,
        cfg.drone.clone(),
        clock,
        ChannelSink(trace_tx.clone()),
    )
    .map_err(link_err)?;
    let mut bridge = run_bridge(
        Arc::clone(&bridge_end),
        bridge_serial.try_clone(),
        bridge_serial,
        cfg.bridge.clone(),
        clock,
        Some(trace_tx),
    )
    .map_err(link_err)?;

    let outcome = run_workload(&controller_end, &clock, cfg.workload.clone()).map_err(link_err)?;

    let bridge_stats = bridge.stop();
    let drone_stats = drone.stop();
    let controller_transport = controller_end.stats();
    let bridge_transport = bridge_end.stats();
    controller_end.close();
    bridge_end.close();
    let events: Vec<TraceEvent> = trace_rx.try_iter().collect();
    let traces = assemble_live_traces(&outcome.log, &events);

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_packet_log(&out.join(PACKET_LOG_FILE), &cfg.run_id(), &outcome.log)?;
    write_traces(&out.join(TRACES_FILE), &traces)?;
    let rtts = rtt(&outcome.log);
    let summary = LiveSummary {
        scenario: cfg.name.clone(),
        run_id: cfg.run_id(),
        mode: "live",
        requests_configured: cfg.workload.request_count,
        requests_answered: rtts.len(),
        controller_error: outcome.error.as_ref().map(|e| e.to_string()),
        link_error: outcome.link_error.as_ref().map(|e| e.to_string()),
        rtt: Percentiles::of(&rtts),
        controller_transport,
        bridge_transport,
        bridge: bridge_stats,
        drone: drone_stats,
    };
    let path = out.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(LiveReport {
        summary,
        log: outcome.log,
        traces,
    })
}
