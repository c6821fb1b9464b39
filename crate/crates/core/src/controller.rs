//! Ground-station workload: periodic setpoints plus non-pipelined
//! request/response exchanges with resend on timeout.
//!
//! [`Controller`] is a pure state machine. Callers feed it timer ticks and
//! received packets and transmit the [`OutPacket`]s it returns; it logs every
//! outgoing and incoming packet with the instant it was given.
//!
//! A run has up to three phases. During setup, requests go out one at a time
//! while setpoints keep their cadence. An optional idle gap follows in which
//! nothing is sent, then an optional setpoint-only flight phase.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Instant};
use crate::crtp::{make_request, make_setpoint, CrtpPacket, PacketKind, COMMANDER_PORT};
use crate::link::{LinkError, PacketLink};
use crate::transport::Deadline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub setpoint_period_ms: u64,
    pub request_count: u32,
    pub request_timeout_ms: u64,
    pub max_resends: u32,
    /// Idle time between the end of the request phase and the flight phase.
    pub inter_phase_gap_ms: Option<u64>,
    /// Length of the setpoint-only phase after the requests.
    pub flight_phase_ms: u64,
    /// Stop sending anything at this instant.
    pub halt_at_ms: Option<u64>,
    pub request_payload_len: usize,
    pub setpoint_deadline_ms: Option<u64>,
    pub request_deadline_ms: Option<u64>,
    pub setpoint_thrust: u16,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            setpoint_period_ms: 200,
            request_count: 500,
            request_timeout_ms: 50,
            max_resends: 10,
            inter_phase_gap_ms: None,
            flight_phase_ms: 0,
            halt_at_ms: None,
            request_payload_len: 14,
            setpoint_deadline_ms: Some(50),
            request_deadline_ms: None,
            setpoint_thrust: 32_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadConfigError {
    #[error("setpoint_period_ms must be > 0")]
    Period,
    #[error("request_count must be > 0")]
    RequestCount,
    #[error("request_timeout_ms must be > 0")]
    Timeout,
    #[error("request_payload_len must be in 1..=30, got {0}")]
    PayloadLen(usize),
    #[error("deadlines must be in 1..=65534 ms")]
    Deadline,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadConfigError> {
        if self.setpoint_period_ms == 0 {
            return Err(WorkloadConfigError::Period);
        }
        if self.request_count == 0 {
            return Err(WorkloadConfigError::RequestCount);
        }
        if self.request_timeout_ms == 0 {
            return Err(WorkloadConfigError::Timeout);
        }
        if !(1..=30).contains(&self.request_payload_len) {
            return Err(WorkloadConfigError::PayloadLen(self.request_payload_len));
        }
        for d in [self.setpoint_deadline_ms, self.request_deadline_ms] {
            if matches!(d, Some(0) | Some(65_535..)) {
                return Err(WorkloadConfigError::Deadline);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Out => "out",
            Direction::In => "in",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "out" => Some(Direction::Out),
            "in" => Some(Direction::In),
            _ => None,
        }
    }
}

/// One logged packet. Setpoints carry no token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketLogRecord {
    pub token: Option<u32>,
    pub kind: PacketKind,
    pub direction: Direction,
    pub timestamp: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutPacket {
    pub bytes: Vec<u8>,
    pub kind: PacketKind,
    pub token: Option<u32>,
    pub deadline: Deadline,
    pub resend: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControllerError {
    #[error("request {token} unanswered after {attempts} transmissions")]
    ResendBudgetExhausted { token: u32, attempts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Setup,
    Gap { until: Instant },
    Flight { until: Instant },
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    token: u32,
    last_sent: Instant,
    resends: u32,
}

pub struct Controller {
    cfg: WorkloadConfig,
    phase: Phase,
    log: Vec<PacketLogRecord>,
    next_setpoint: Option<Instant>,
    next_token: u32,
    pending: Option<Pending>,
    /// Latest full token issued for each wire token byte.
    tokens_by_wire: BTreeMap<u8, u32>,
    answered: u32,
    resends: u32,
    error: Option<ControllerError>,
    finished_at: Option<Instant>,
    halted: bool,
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

impl Controller {
    pub fn new(cfg: WorkloadConfig) -> Result<Self, WorkloadConfigError> {
        cfg.validate()?;
        Ok(Controller {
            cfg,
            phase: Phase::Idle,
            log: Vec::new(),
            next_setpoint: None,
            next_token: 0,
            pending: None,
            tokens_by_wire: BTreeMap::new(),
            answered: 0,
            resends: 0,
            error: None,
            finished_at: None,
            halted: false,
        })
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[PacketLogRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<PacketLogRecord> {
        self.log
    }

    pub fn error(&self) -> Option<&ControllerError> {
        self.error.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn finished_at(&self) -> Option<Instant> {
        self.finished_at
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn answered(&self) -> u32 {
        self.answered
    }

    pub fn resends(&self) -> u32 {
        self.resends
    }

    /// Token currently awaiting its response, if any.
    pub fn outstanding_token(&self) -> Option<u32> {
        self.pending.map(|p| p.token)
    }

    /// Starts the run at `now`: first setpoint and first request go out.
    pub fn start(&mut self, now: Instant) -> Vec<OutPacket> {
        if self.phase != Phase::Idle {
            return Vec::new();
        }
        self.phase = Phase::Setup;
        self.next_setpoint = Some(now);
        let mut out = Vec::new();
        self.tick(now, &mut out);
        if !self.is_finished() {
            self.issue_request(now, &mut out);
        }
        out
    }

    /// Earliest instant at which `on_timer` has something to do.
    pub fn next_wake(&self) -> Option<Instant> {
        if matches!(self.phase, Phase::Idle | Phase::Done) {
            return None;
        }
        let mut next = self.next_setpoint;
        let mut consider = |t: Instant| next = Some(next.map_or(t, |n: Instant| n.min(t)));
        if let Some(p) = self.pending {
            consider(p.last_sent + ms(self.cfg.request_timeout_ms));
        }
        match self.phase {
            Phase::Gap { until } | Phase::Flight { until } => consider(until),
            _ => {}
        }
        if let Some(h) = self.cfg.halt_at_ms {
            consider(Instant::from_millis(h));
        }
        next
    }

    pub fn on_timer(&mut self, now: Instant) -> Vec<OutPacket> {
        let mut out = Vec::new();
        self.tick(now, &mut out);
        out
    }

    fn tick(&mut self, now: Instant, out: &mut Vec<OutPacket>) {
        if self.cfg.halt_at_ms.is_some_and(|h| now >= Instant::from_millis(h)) && !self.is_finished() {
            self.halted = true;
            self.finish(Instant::from_millis(self.cfg.halt_at_ms.unwrap_or(0)));
            return;
        }
        match self.phase {
            Phase::Gap { until } if now >= until => self.enter_flight(until),
            Phase::Flight { until } if now >= until => self.finish(until),
            _ => {}
        }
        if self.is_finished() {
            return;
        }
        while let Some(t) = self.next_setpoint.filter(|t| *t <= now) {
            self.emit_setpoint(t, out);
            self.next_setpoint = Some(t + ms(self.cfg.setpoint_period_ms));
            if let Phase::Flight { until } = self.phase {
                if t + ms(self.cfg.setpoint_period_ms) >= until {
                    self.next_setpoint = None;
                }
            }
        }
        if let Some(p) = self.pending {
            if now >= p.last_sent + ms(self.cfg.request_timeout_ms) {
                if p.resends < self.cfg.max_resends {
                    self.send_request(now, p.token, true, out);
                    self.pending = Some(Pending {
                        token: p.token,
                        last_sent: now,
                        resends: p.resends + 1,
                    });
                    self.resends += 1;
                } else {
                    self.pending = None;
                    self.error = Some(ControllerError::ResendBudgetExhausted {
                        token: p.token,
                        attempts: p.resends + 1,
                    });
                    self.finish(now);
                }
            }
        }
    }

    fn emit_setpoint(&mut self, at: Instant, out: &mut Vec<OutPacket>) {
        let packet = make_setpoint(0.0, 0.0, 0.0, self.cfg.setpoint_thrust);
        self.log.push(PacketLogRecord {
            token: None,
            kind: PacketKind::Setpoint,
            direction: Direction::Out,
            timestamp: at,
        });
        out.push(OutPacket {
            bytes: packet.encode(),
            kind: PacketKind::Setpoint,
            token: None,
            deadline: self.cfg.setpoint_deadline_ms.into(),
            resend: false,
        });
    }

    fn send_request(&mut self, now: Instant, token: u32, resend: bool, out: &mut Vec<OutPacket>) {
        let packet = make_request(token as u8, self.cfg.request_payload_len);
        self.log.push(PacketLogRecord {
            token: Some(token),
            kind: PacketKind::Request,
            direction: Direction::Out,
            timestamp: now,
        });
        out.push(OutPacket {
            bytes: packet.encode(),
            kind: PacketKind::Request,
            token: Some(token),
            deadline: self.cfg.request_deadline_ms.into(),
            resend,
        });
    }

    fn issue_request(&mut self, now: Instant, out: &mut Vec<OutPacket>) {
        let token = self.next_token;
        self.next_token += 1;
        self.tokens_by_wire.insert(token as u8, token);
        self.send_request(now, token, false, out);
        self.pending = Some(Pending {
            token,
            last_sent: now,
            resends: 0,
        });
    }

    fn end_setup(&mut self, now: Instant) {
        match self.cfg.inter_phase_gap_ms {
            Some(gap) if gap > 0 => {
                self.phase = Phase::Gap { until: now + ms(gap) };
                self.next_setpoint = None;
            }
            _ => self.continue_flight(now),
        }
    }

    /// Flight phase straight after setup keeps the running setpoint cadence.
    fn continue_flight(&mut self, now: Instant) {
        if self.cfg.flight_phase_ms == 0 {
            self.finish(now);
            return;
        }
        let until = now + ms(self.cfg.flight_phase_ms);
        self.phase = Phase::Flight { until };
        if self.next_setpoint.is_some_and(|t| t >= until) {
            self.next_setpoint = None;
        }
    }

    /// Flight phase after a gap restarts the cadence at the end of the gap.
    fn enter_flight(&mut self, at: Instant) {
        if self.cfg.flight_phase_ms == 0 {
            self.finish(at);
            return;
        }
        self.phase = Phase::Flight {
            until: at + ms(self.cfg.flight_phase_ms),
        };
        self.next_setpoint = Some(at);
    }

    fn finish(&mut self, at: Instant) {
        self.phase = Phase::Done;
        self.next_setpoint = None;
        self.pending = None;
        self.finished_at = Some(at);
    }

    /// Handles an incoming CRTP packet. Setpoint-port traffic and unknown
    /// tokens are ignored; duplicate responses are logged but change nothing.
    pub fn on_receive(&mut self, now: Instant, bytes: &[u8]) -> Vec<OutPacket> {
        let mut out = Vec::new();
        let Ok(packet) = CrtpPacket::decode(bytes) else {
            return out;
        };
        if packet.port() == COMMANDER_PORT || matches!(self.phase, Phase::Idle) {
            return out;
        }
        let Some(wire) = packet.token() else {
            return out;
        };
        let Some(&token) = self.tokens_by_wire.get(&wire) else {
            return out;
        };
        self.log.push(PacketLogRecord {
            token: Some(token),
            kind: PacketKind::Response,
            direction: Direction::In,
            timestamp: now,
        });
        if self.pending.is_some_and(|p| p.token == token) && self.phase == Phase::Setup {
            self.pending = None;
            self.answered += 1;
            if self.answered < self.cfg.request_count {
                // catch up on a setpoint due at this very instant first
                self.tick(now, &mut out);
                self.issue_request(now, &mut out);
            } else {
                self.end_setup(now);
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct WorkloadOutcome {
    pub log: Vec<PacketLogRecord>,
    pub error: Option<ControllerError>,
    pub link_error: Option<LinkError>,
}

/// Drives the workload over a blocking link in real time.
pub fn run_workload<L: PacketLink + ?Sized, C: Clock>(
    link: &L,
    clock: &C,
    cfg: WorkloadConfig,
) -> Result<WorkloadOutcome, WorkloadConfigError> {
    let mut ctl = Controller::new(cfg)?;
    let send_all = |packets: Vec<OutPacket>| -> Result<(), LinkError> {
        for p in packets {
            link.send(&p.bytes, p.deadline)?;
        }
        Ok(())
    };
    let mut link_error = None;
    if let Err(e) = send_all(ctl.start(clock.now())) {
        link_error = Some(e);
    }
    while link_error.is_none() && !ctl.is_finished() {
        let now = clock.now();
        let wait = ctl
            .next_wake()
            .map_or(Duration::from_millis(10), |t| t.saturating_since(now));
        let packets = match link.recv_timeout(wait) {
            Ok(Some(bytes)) => ctl.on_receive(clock.now(), &bytes),
            Ok(None) => ctl.on_timer(clock.now()),
            Err(e) => {
                link_error = Some(e);
                break;
            }
        };
        if let Err(e) = send_all(packets) {
            link_error = Some(e);
        }
        let timer = ctl.on_timer(clock.now());
        if let Err(e) = send_all(timer) {
            link_error = Some(e);
        }
    }
    let error = ctl.error().cloned();
    Ok(WorkloadOutcome {
        log: ctl.into_log(),
        error,
        link_error,
    })
}

pub const PACKET_LOG_HEADER: [&str; 5] = ["run_id", "token", "kind", "direction", "timestamp_us"];

#[derive(Debug, Error)]
pub enum PacketLogError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: u64, message: String },
}

pub fn write_packet_log(path: &Path, run_id: &str, log: &[PacketLogRecord]) -> Result<(), PacketLogError> {
    let p = path.display().to_string();
    let csv_err = |source| PacketLogError::Csv { path: p.clone(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(PACKET_LOG_HEADER).map_err(csv_err)?;
    for r in log {
        let token = r.token.map(|t| t.to_string()).unwrap_or_default();
        let ts = r.timestamp.as_micros().to_string();
        w.write_record([run_id, &token, r.kind.as_str(), r.direction.as_str(), &ts])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|source| PacketLogError::Io { path: p.clone(), source })
}

/// Reads a packet log; returns the run id (empty for an empty log) and records.
pub fn read_packet_log(path: &Path) -> Result<(String, Vec<PacketLogRecord>), PacketLogError> {
    let p = path.display().to_string();
    let mut rd = csv::Reader::from_path(path).map_err(|source| PacketLogError::Csv {
        path: p.clone(),
        source,
    })?;
    let malformed = |line: u64, message: String| PacketLogError::Malformed {
        path: p.clone(),
        line,
        message,
    };
    let header = rd
        .headers()
        .map_err(|source| PacketLogError::Csv { path: p.clone(), source })?
        .clone();
    if header.iter().ne(PACKET_LOG_HEADER) {
        return Err(malformed(1, format!("expected header {}", PACKET_LOG_HEADER.join(","))));
    }
    let mut run_id = String::new();
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|source| PacketLogError::Csv { path: p.clone(), source })?;
        if i == 0 {
            run_id = row[0].to_string();
        }
        let token = match &row[1] {
            "" => None,
            t => Some(t.parse().map_err(|_| malformed(line, format!("bad token {t:?}")))?),
        };
        let kind = PacketKind::parse(&row[2]).ok_or_else(|| malformed(line, format!("bad kind {:?}", &row[2])))?;
        let direction =
            Direction::parse(&row[3]).ok_or_else(|| malformed(line, format!("bad direction {:?}", &row[3])))?;
        let ts: u64 = row[4]
            .parse()
            .map_err(|_| malformed(line, format!("bad timestamp {:?}", &row[4])))?;
        out.push(PacketLogRecord {
            token,
            kind,
            direction,
            timestamp: Instant::from_micros(ts),
        });
    }
    Ok((run_id, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(requests: u32) -> WorkloadConfig {
        WorkloadConfig {
            request_count: requests,
            ..WorkloadConfig::default()
        }
    }

    fn token_of(p: &OutPacket) -> u8 {
        p.bytes[1]
    }

    #[test]
    fn start_sends_setpoint_then_request() {
        let mut c = Controller::new(cfg(2)).unwrap();
        let out = c.start(Instant::ZERO);
        let kinds: Vec<_> = out.iter().map(|p| p.kind).collect();
        assert_eq!(kinds, [PacketKind::Setpoint, PacketKind::Request]);
        assert_eq!(out[0].deadline, Deadline::from_millis(50));
        assert_eq!(out[1].deadline, Deadline::NONE);
        assert_eq!(out[1].bytes.len(), 15);
        assert_eq!(c.next_wake(), Some(Instant::from_millis(50)));
    }

    #[test]
    fn timeout_resends_same_token_and_rtt_counts_from_first() {
        let mut c = Controller::new(cfg(1)).unwrap();
        let out = c.start(Instant::ZERO);
        let out2 = c.on_timer(Instant::from_millis(50));
        assert_eq!(out2.len(), 1);
        assert!(out2[0].resend);
        assert_eq!(out2[0].bytes, out[1].bytes);
        c.on_receive(Instant::from_millis(58), &out2[0].bytes);
        assert!(c.is_finished());
        let outs: Vec<_> = c
            .log()
            .iter()
            .filter(|r| r.kind == PacketKind::Request)
            .map(|r| r.timestamp)
            .collect();
        assert_eq!(outs, [Instant::ZERO, Instant::from_millis(50)]);
    }

    #[test]
    fn budget_exhaustion() {
        let mut c = Controller::new(cfg(3)).unwrap();
        c.start(Instant::ZERO);
        let mut t = Instant::ZERO;
        while !c.is_finished() {
            t = c.next_wake().unwrap();
            c.on_timer(t);
        }
        assert_eq!(
            c.error(),
            Some(&ControllerError::ResendBudgetExhausted { token: 0, attempts: 11 })
        );
        assert_eq!(t, Instant::from_millis(550));
        let outs = c
            .log()
            .iter()
            .filter(|r| r.kind == PacketKind::Request && r.token == Some(0))
            .count();
        assert_eq!(outs, 11);
    }

    #[test]
    fn next_request_waits_for_response() {
        let mut c = Controller::new(cfg(3)).unwrap();
        let out = c.start(Instant::ZERO);
        let req = out.into_iter().find(|p| p.kind == PacketKind::Request).unwrap();
        assert_eq!(token_of(&req), 0);
        assert!(c.on_timer(Instant::from_millis(10)).is_empty());
        let next = c.on_receive(Instant::from_millis(10), &req.bytes);
        assert_eq!(next.len(), 1);
        assert_eq!(token_of(&next[0]), 1);
        // duplicate response for token 0 changes nothing
        assert!(c.on_receive(Instant::from_millis(11), &req.bytes).is_empty());
        assert_eq!(c.outstanding_token(), Some(1));
    }

    #[test]
    fn flight_phase_keeps_cadence_and_ends() {
        let mut c = Controller::new(WorkloadConfig {
            request_count: 1,
            flight_phase_ms: 1000,
            ..WorkloadConfig::default()
        })
        .unwrap();
        let out = c.start(Instant::ZERO);
        c.on_receive(Instant::from_millis(9), &out[1].bytes);
        while let Some(t) = c.next_wake() {
            c.on_timer(t);
        }
        let sp: Vec<u64> = c
            .log()
            .iter()
            .filter(|r| r.kind == PacketKind::Setpoint)
            .map(|r| r.timestamp.as_micros() / 1000)
            .collect();
        assert_eq!(sp, [0, 200, 400, 600, 800, 1000]);
        assert_eq!(c.finished_at(), Some(Instant::from_millis(1009)));
    }

    #[test]
    fn gap_silences_everything() {
        let mut c = Controller::new(WorkloadConfig {
            request_count: 1,
            inter_phase_gap_ms: Some(5000),
            flight_phase_ms: 400,
            ..WorkloadConfig::default()
        })
        .unwrap();
        let out = c.start(Instant::ZERO);
        c.on_receive(Instant::from_millis(9), &out[1].bytes);
        while let Some(t) = c.next_wake() {
            c.on_timer(t);
        }
        let sp: Vec<u64> = c
            .log()
            .iter()
            .filter(|r| r.kind == PacketKind::Setpoint)
            .map(|r| r.timestamp.as_micros() / 1000)
            .collect();
        assert_eq!(sp, [0, 5009, 5209]);
    }

    #[test]
    fn halt_stops_output() {
        let mut c = Controller::new(WorkloadConfig {
            request_count: 1,
            flight_phase_ms: 10_000,
            halt_at_ms: Some(1000),
            ..WorkloadConfig::default()
        })
        .unwrap();
        let out = c.start(Instant::ZERO);
        c.on_receive(Instant::from_millis(9), &out[1].bytes);
        while let Some(t) = c.next_wake() {
            c.on_timer(t);
        }
        assert!(c.halted());
        let last = c.log().iter().rfind(|r| r.kind == PacketKind::Setpoint).unwrap();
        assert_eq!(last.timestamp, Instant::from_millis(800));
    }

    #[test]
    fn packet_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = vec![
            PacketLogRecord {
                token: None,
                kind: PacketKind::Setpoint,
                direction: Direction::Out,
                timestamp: Instant::ZERO,
            },
            PacketLogRecord {
                token: Some(3),
                kind: PacketKind::Response,
                direction: Direction::In,
                timestamp: Instant::from_micros(9001),
            },
        ];
        write_packet_log(&path, "r1", &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "run_id,token,kind,direction,timestamp_us\nr1,,setpoint,out,0\nr1,3,response,in,9001\n"
        );
        assert_eq!(read_packet_log(&path).unwrap(), ("r1".to_string(), log));
    }
}
