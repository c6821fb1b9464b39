//! Deterministic single-threaded wiring of every component under one
//! virtual clock.
//!
//! Discrete happenings (wire arrivals, drone replies, bridge completions) are
//! clock events. Components with their own timers (controller, transport
//! endpoints, channels, watchdog) are polled: before each pop the loop
//! schedules a wake-up at the earliest instant any of them asks for.

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use super::config::{PathKind, ScenarioConfig};
use crate::bridge::{BridgeConfigError, BridgeCore, BridgeStats, Flow};
use crate::chansim::{Channel, ChannelConfig, ChannelConfigError, ChannelStats};
use crate::clock::{ClockError, Instant, VirtualClock};
use crate::controller::{Controller, ControllerError, OutPacket, PacketLogRecord, WorkloadConfigError};
use crate::crtp::PacketKind;
use crate::drone::{DroneConfigError, DroneSim, DroneStats};
use crate::serial::{SerialFrame, WireConfig, WireConfigError, WirePipe};
use crate::tracelab::{Stage, TraceCollector, TraceRecord, TraceSink};
use crate::transport::{Connection, ExpiryMode, TransportError, TransportStats};

/// Pops allowed at a single instant before the loop is declared stuck.
const STUCK_LIMIT: u32 = 100_000;
/// How long a halted run keeps going after the watchdog would have fired.
const HALT_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum DeskError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelConfigError),
    #[error("wire: {0}")]
    Wire(#[from] WireConfigError),
    #[error("bridge: {0}")]
    Bridge(#[from] BridgeConfigError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadConfigError),
    #[error("drone: {0}")]
    Drone(#[from] DroneConfigError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error("event loop made no progress at {0}")]
    Stuck(Instant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

enum Event {
    Start,
    Wake,
    WireArrive(Dir, SerialFrame),
    DroneEmit(SerialFrame),
    BridgeDone(Flow),
}

/// Transport, bridge and serial pieces of the bridged path.
struct Relay {
    controller_end: Connection,
    bridge_end: Connection,
    mode: ExpiryMode,
    bridge: BridgeCore,
    wire_up: WirePipe,
    wire_down: WirePipe,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DeskCounters {
    pub uplink_channel: ChannelStats,
    pub downlink_channel: ChannelStats,
    pub controller_transport: Option<TransportStats>,
    pub bridge_transport: Option<TransportStats>,
    pub bridge: Option<BridgeStats>,
    pub drone: DroneStats,
    pub serial_bytes_up: u64,
    pub serial_bytes_down: u64,
    pub radio_decode_errors: u64,
}

#[derive(Debug)]
pub struct DeskRun {
    pub log: Vec<PacketLogRecord>,
    pub traces: Vec<TraceRecord>,
    /// Virtual time at which the run stopped.
    pub end: Instant,
    pub controller_error: Option<ControllerError>,
    pub halted: bool,
    /// The run hit `max_duration_ms` before the workload finished.
    pub truncated: bool,
    pub requests_answered: u32,
    pub resends: u32,
    pub failsafe_at: Option<Instant>,
    /// Arrival of the last setpoint at the drone.
    pub last_setpoint_at_drone: Option<Instant>,
    pub counters: DeskCounters,
}

struct Desk {
    clock: VirtualClock<Event>,
    wakes: BTreeSet<Instant>,
    ctl: Controller,
    up: Channel,
    down: Channel,
    relay: Option<Relay>,
    drone: DroneSim,
    traces: TraceCollector,
    radio_decode_errors: u64,
}

fn channel(base: &ChannelConfig, seed: u64) -> Result<Channel, ChannelConfigError> {
    Channel::new(ChannelConfig {
        seed,
        ..base.clone()
    })
}

fn wire(base: &WireConfig, seed: u64) -> Result<WirePipe, WireConfigError> {
    WirePipe::new(WireConfig {
        seed,
        ..base.clone()
    })
}

/// Runs `cfg` to completion in virtual time.
pub fn run_desk(cfg: &ScenarioConfig) -> Result<DeskRun, DeskError> {
    let seeds = cfg.stream_seeds();
    let relay = match cfg.path {
        PathKind::Radio => None,
        PathKind::Prrt => Some(Relay {
            controller_end: Connection::new(cfg.transport.clone())?,
            bridge_end: Connection::new(cfg.transport.clone())?,
            mode: cfg.expiry_mode,
            bridge: BridgeCore::new(cfg.bridge.clone())?,
            wire_up: wire(&cfg.wire, seeds.uplink_wire)?,
            wire_down: wire(&cfg.wire, seeds.downlink_wire)?,
        }),
    };
    let desk = Desk {
        clock: VirtualClock::new(),
        wakes: BTreeSet::new(),
        ctl: Controller::new(cfg.workload.clone())?,
        up: channel(&cfg.channel, seeds.uplink_channel)?,
        down: channel(&cfg.channel, seeds.downlink_channel)?,
        relay,
        drone: DroneSim::new(cfg.drone.clone(), Instant::ZERO)?,
        traces: TraceCollector::new(),
        radio_decode_errors: 0,
    };
    desk.run(Instant::from_millis(cfg.max_duration_ms))
}

impl Desk {
    fn run(mut self, cap: Instant) -> Result<DeskRun, DeskError> {
        self.clock.schedule(Instant::ZERO, Event::Start)?;
        let mut same_instant = 0;
        let mut last = Instant::ZERO;
        let mut truncated = false;
        let mut last_setpoint_at_drone = None;
        loop {
            self.schedule_wake()?;
            let Some(at) = self.clock.peek_time() else { break };
            if at > cap {
                truncated = !self.ctl.is_finished();
                break;
            }
            let (now, event) = self.clock.pop().expect("peeked");
            if now == last {
                same_instant += 1;
                if same_instant > STUCK_LIMIT {
                    return Err(DeskError::Stuck(now));
                }
            } else {
                same_instant = 0;
                last = now;
            }
            if let Event::Wake = event {
                self.wakes.remove(&now);
            }
            let setpoints_before = self.drone.stats().setpoints;
            self.handle(now, event)?;
            self.settle(now)?;
            if self.drone.stats().setpoints != setpoints_before {
                last_setpoint_at_drone = Some(now);
            }
            if self.ctl.is_finished() {
                if !self.ctl.halted() {
                    break;
                }
                let halt = self.ctl.finished_at().unwrap_or(now);
                if now > halt + self.drone.config().watchdog_timeout() + HALT_GRACE {
                    break;
                }
            }
        }
        let end = self.clock.now();
        let counters = DeskCounters {
            uplink_channel: self.up.stats(),
            downlink_channel: self.down.stats(),
            controller_transport: self.relay.as_ref().map(|r| r.controller_end.stats()),
            bridge_transport: self.relay.as_ref().map(|r| r.bridge_end.stats()),
            bridge: self.relay.as_ref().map(|r| r.bridge.stats()),
            drone: self.drone.stats(),
            serial_bytes_up: self.relay.as_ref().map_or(0, |r| r.wire_up.bytes_sent()),
            serial_bytes_down: self.relay.as_ref().map_or(0, |r| r.wire_down.bytes_sent()),
            radio_decode_errors: self.radio_decode_errors,
        };
        Ok(DeskRun {
            end,
            controller_error: self.ctl.error().cloned(),
            halted: self.ctl.halted(),
            truncated,
            requests_answered: self.ctl.answered(),
            resends: self.ctl.resends(),
            failsafe_at: self.drone.first_failsafe(),
            last_setpoint_at_drone,
            counters,
            traces: self.traces.into_traces(),
            log: self.ctl.into_log(),
        })
    }

    /// Earliest instant a polled component wants attention.
    fn polled_wake(&self) -> Option<Instant> {
        let mut times = vec![
            self.ctl.next_wake(),
            self.up.next_delivery(),
            self.down.next_delivery(),
            self.drone.watchdog_deadline(),
        ];
        if let Some(r) = &self.relay {
            times.push(r.controller_end.poll_timeout());
            times.push(r.bridge_end.poll_timeout());
        }
        times.into_iter().flatten().min()
    }

    fn schedule_wake(&mut self) -> Result<(), DeskError> {
        if self.ctl.is_finished() && !self.ctl.halted() {
            return Ok(());
        }
        if let Some(t) = self.polled_wake() {
            let t = t.max(self.clock.now());
            if self.wakes.insert(t) {
                self.clock.schedule(t, Event::Wake)?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, now: Instant, event: Event) -> Result<(), DeskError> {
        match event {
            Event::Start => {
                let out = self.ctl.start(now);
                self.dispatch(now, out)?;
            }
            Event::Wake => {}
            Event::WireArrive(Dir::Up, frame) => self.drone_receive(now, &frame)?,
            Event::WireArrive(Dir::Down, frame) => {
                let relay = self.relay.as_mut().expect("wire implies relay");
                if let Some(done) = relay.bridge.offer(Flow::Downlink, now, frame.payload(), &mut self.traces) {
                    self.clock.schedule(done, Event::BridgeDone(Flow::Downlink))?;
                }
            }
            Event::DroneEmit(frame) => {
                self.traces.record(Stage::DroneTx, frame.payload(), now);
                match self.relay.as_mut() {
                    Some(relay) => {
                        let arrival = relay.wire_down.transmit(now, frame.wire_len());
                        self.clock.schedule(arrival, Event::WireArrive(Dir::Down, frame))?;
                    }
                    None => {
                        self.down.push(frame.into_payload(), now);
                    }
                }
            }
            Event::BridgeDone(flow) => {
                let relay = self.relay.as_mut().expect("bridge implies relay");
                let Some((bytes, next)) = relay.bridge.complete(flow, now, &mut self.traces) else {
                    return Ok(());
                };
                if let Some(next) = next {
                    self.clock.schedule(next, Event::BridgeDone(flow))?;
                }
                match flow {
                    Flow::Uplink => {
                        let frame = SerialFrame::crtp(bytes).expect("bridge admits only CRTP-sized packets");
                        let arrival = relay.wire_up.transmit(now, frame.wire_len());
                        self.clock.schedule(arrival, Event::WireArrive(Dir::Up, frame))?;
                    }
                    Flow::Downlink => {
                        let deadline = relay.bridge.config().downstream_deadline();
                        relay.bridge_end.send(now, &bytes, deadline)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn drone_receive(&mut self, now: Instant, frame: &SerialFrame) -> Result<(), DeskError> {
        self.traces.record(Stage::DroneRx, frame.payload(), now);
        for (at, reply) in self.drone.handle_frame(frame, now) {
            self.clock.schedule(at, Event::DroneEmit(reply))?;
        }
        Ok(())
    }

    fn controller_receive(&mut self, now: Instant, crtp: &[u8]) -> Result<(), DeskError> {
        self.traces.record(Stage::ControllerRecv, crtp, now);
        let out = self.ctl.on_receive(now, crtp);
        self.dispatch(now, out)
    }

    fn dispatch(&mut self, now: Instant, packets: Vec<OutPacket>) -> Result<(), DeskError> {
        for p in packets {
            if let (PacketKind::Request, Some(token), false) = (p.kind, p.token, p.resend) {
                self.traces.begin_request(token);
            }
            self.traces.record(Stage::ControllerSend, &p.bytes, now);
            match self.relay.as_mut() {
                Some(relay) => {
                    let receipt = relay.controller_end.send(now, &p.bytes, p.deadline)?;
                    self.traces.record(Stage::TransportTx, &p.bytes, receipt.departure_ts);
                }
                None => {
                    self.up.push(p.bytes, now);
                }
            }
        }
        Ok(())
    }

    /// Services every polled component at `now`.
    fn settle(&mut self, now: Instant) -> Result<(), DeskError> {
        for d in self.up.poll(now) {
            match self.relay.as_mut() {
                // undecodable datagrams are counted by the endpoint
                Some(relay) => {
                    let _ = relay.bridge_end.handle_datagram(now, &d.payload);
                }
                None => match SerialFrame::crtp(d.payload) {
                    Ok(frame) => self.drone_receive(now, &frame)?,
                    Err(_) => self.radio_decode_errors += 1,
                },
            }
        }
        for d in self.down.poll(now) {
            match self.relay.as_mut() {
                Some(relay) => {
                    let _ = relay.controller_end.handle_datagram(now, &d.payload);
                }
                None => self.controller_receive(now, &d.payload)?,
            }
        }
        if let Some(relay) = self.relay.as_mut() {
            relay.controller_end.handle_timeout(now);
            relay.bridge_end.handle_timeout(now);
            while let Ok(d) = relay.bridge_end.recv(now, relay.mode) {
                if let Some(done) = relay.bridge.offer(Flow::Uplink, now, &d.payload, &mut self.traces) {
                    self.clock.schedule(done, Event::BridgeDone(Flow::Uplink))?;
                }
            }
            let mut responses = Vec::new();
            while let Ok(d) = relay.controller_end.recv(now, relay.mode) {
                responses.push(d.payload);
            }
            for crtp in responses {
                self.traces.record(Stage::TransportRx, &crtp, now);
                self.controller_receive(now, &crtp)?;
            }
        }
        let out = self.ctl.on_timer(now);
        self.dispatch(now, out)?;
        if let Some(relay) = self.relay.as_mut() {
            while let Some(bytes) = relay.controller_end.poll_transmit(now) {
                self.up.push(bytes, now);
            }
            while let Some(bytes) = relay.bridge_end.poll_transmit(now) {
                self.down.push(bytes, now);
            }
        }
        if self.drone.watchdog_deadline().is_some_and(|t| t <= now) {
            self.drone.watchdog_tick(now);
        }
        Ok(())
    }
}
