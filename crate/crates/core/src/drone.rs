//! Simulated flight-controller endpoint: applies setpoints, answers requests
//! after a fixed processing delay and runs a command watchdog.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Instant};
use crate::crtp::{make_response, CrtpPacket, PacketKind, Setpoint};
use crate::serial::{frame_encode, FrameDecoder, SerialFrame, FRAME_TYPE_CRTP};
use crate::tracelab::{Stage, TraceSink};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroneConfig {
    pub processing_delay_us: u64,
    pub watchdog_timeout_ms: u64,
}

impl Default for DroneConfig {
    fn default() -> Self {
        DroneConfig {
            processing_delay_us: 100,
            watchdog_timeout_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DroneConfigError {
    #[error("watchdog_timeout_ms must be > 0")]
    Watchdog,
}

impl DroneConfig {
    pub fn validate(&self) -> Result<(), DroneConfigError> {
        if self.watchdog_timeout_ms == 0 {
            return Err(DroneConfigError::Watchdog);
        }
        Ok(())
    }

    pub fn processing_delay(&self) -> Duration {
        Duration::from_micros(self.processing_delay_us)
    }

    pub fn watchdog_timeout(&self) -> Duration {
        Duration::from_millis(self.watchdog_timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneState {
    pub last_setpoint: Option<Setpoint>,
    /// Boot time until the first setpoint arrives.
    pub last_setpoint_time: Instant,
    pub failsafe_engaged: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DroneStats {
    pub setpoints: u64,
    pub requests: u64,
    pub responses: u64,
    pub decode_errors: u64,
    pub failsafe_engagements: u64,
}

pub struct DroneSim {
    cfg: DroneConfig,
    state: DroneState,
    stats: DroneStats,
    first_failsafe: Option<Instant>,
}

impl DroneSim {
    pub fn new(cfg: DroneConfig, boot: Instant) -> Result<Self, DroneConfigError> {
        cfg.validate()?;
        Ok(DroneSim {
            cfg,
            state: DroneState {
                last_setpoint: None,
                last_setpoint_time: boot,
                failsafe_engaged: false,
            },
            stats: DroneStats::default(),
            first_failsafe: None,
        })
    }

    pub fn config(&self) -> &DroneConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DroneState {
        &self.state
    }

    pub fn stats(&self) -> DroneStats {
        self.stats
    }

    /// Instant the failsafe first engaged.
    pub fn first_failsafe(&self) -> Option<Instant> {
        self.first_failsafe
    }

    /// Thrust actually applied: zero while the failsafe is engaged.
    pub fn effective_thrust(&self) -> u16 {
        match (self.state.failsafe_engaged, self.state.last_setpoint) {
            (false, Some(sp)) => sp.thrust,
            _ => 0,
        }
    }

    /// Instant at which the watchdog fires if no setpoint arrives first.
    pub fn watchdog_deadline(&self) -> Option<Instant> {
        (!self.state.failsafe_engaged).then(|| self.state.last_setpoint_time + self.cfg.watchdog_timeout())
    }

    pub fn handle_frame(&mut self, frame: &SerialFrame, now: Instant) -> Vec<(Instant, SerialFrame)> {
        if frame.frame_type != FRAME_TYPE_CRTP {
            self.stats.decode_errors += 1;
            return Vec::new();
        }
        let Ok(packet) = CrtpPacket::decode(frame.payload()) else {
            self.stats.decode_errors += 1;
            return Vec::new();
        };
        match packet.uplink_kind() {
            PacketKind::Setpoint => {
                let Some(sp) = Setpoint::from_packet(&packet) else {
                    self.stats.decode_errors += 1;
                    return Vec::new();
                };
                self.stats.setpoints += 1;
                self.state.last_setpoint = Some(sp);
                self.state.last_setpoint_time = now;
                self.state.failsafe_engaged = false;
                Vec::new()
            }
            _ => {
                self.stats.requests += 1;
                self.stats.responses += 1;
                let reply = SerialFrame::crtp(make_response(&packet).encode()).expect("response fits a frame");
                vec![(now + self.cfg.processing_delay(), reply)]
            }
        }
    }

    /// Engages the failsafe once `watchdog_timeout_ms` has passed since the
    /// last setpoint. The boundary instant itself counts as expired.
    pub fn watchdog_tick(&mut self, now: Instant) {
        if self.state.failsafe_engaged {
            return;
        }
        if now.saturating_since(self.state.last_setpoint_time) >= self.cfg.watchdog_timeout() {
            self.state.failsafe_engaged = true;
            self.stats.failsafe_engagements += 1;
            self.first_failsafe.get_or_insert(now);
        }
    }
}

/// A drone running on its own thread behind a byte stream.
pub struct DroneHandle {
    stop: Arc<AtomicBool>,
    sim: Arc<Mutex<DroneSim>>,
    thread: Option<JoinHandle<()>>,
}

impl DroneHandle {
    pub fn stats(&self) -> DroneStats {
        self.sim.lock().expect("drone lock").stats()
    }

    pub fn failsafe_engaged(&self) -> bool {
        self.sim.lock().expect("drone lock").state().failsafe_engaged
    }

    pub fn stop(&mut self) -> DroneStats {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.stats()
    }
}

impl Drop for DroneHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves frames from `reader`, answering on `writer`. The reader must have a
/// read timeout so the thread can notice `stop`.
pub fn spawn_drone<R, W, C, S>(
    mut reader: R,
    mut writer: W,
    cfg: DroneConfig,
    clock: C,
    mut sink: S,
) -> Result<DroneHandle, DroneConfigError>
where
    R: Read + Send + 'static,
    W: Write + Send + 'static,
    C: Clock + Send + 'static,
    S: TraceSink + Send + 'static,
{
    let sim = Arc::new(Mutex::new(DroneSim::new(cfg, clock.now())?));
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let sim = Arc::clone(&sim);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            let mut decoder = FrameDecoder::new();
            let mut buf = [0u8; 256];
            while !stop.load(Ordering::SeqCst) {
                let n = match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                        sim.lock().expect("drone lock").watchdog_tick(clock.now());
                        continue;
                    }
                    Err(_) => break,
                };
                for frame in decoder.push(&buf[..n]) {
                    let now = clock.now();
                    sink.record(Stage::DroneRx, frame.payload(), now);
                    let replies = sim.lock().expect("drone lock").handle_frame(&frame, now);
                    for (at, reply) in replies {
                        let wait = at.saturating_since(clock.now());
                        if !wait.is_zero() {
                            std::thread::sleep(wait);
                        }
                        sink.record(Stage::DroneTx, reply.payload(), clock.now());
                        if writer.write_all(&frame_encode(&reply)).is_err() {
                            return;
                        }
                    }
                }
                sim.lock().expect("drone lock").watchdog_tick(clock.now());
            }
        })
    };
    Ok(DroneHandle {
        stop,
        sim,
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crtp::{make_request, make_setpoint};

    fn frame(p: CrtpPacket) -> SerialFrame {
        SerialFrame::crtp(p.encode()).unwrap()
    }

    #[test]
    fn setpoint_is_unanswered() {
        let mut d = DroneSim::new(DroneConfig::default(), Instant::ZERO).unwrap();
        let out = d.handle_frame(&frame(make_setpoint(1.0, 0.0, 0.0, 900)), Instant::from_millis(3));
        assert!(out.is_empty());
        assert_eq!(d.state().last_setpoint.unwrap().thrust, 900);
        assert_eq!(d.state().last_setpoint_time, Instant::from_millis(3));
        assert_eq!(d.effective_thrust(), 900);
    }

    #[test]
    fn request_answered_after_processing_delay() {
        let mut d = DroneSim::new(DroneConfig::default(), Instant::ZERO).unwrap();
        let req = make_request(7, 14);
        let out = d.handle_frame(&frame(req.clone()), Instant::ZERO);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, Instant::from_micros(100));
        let resp = CrtpPacket::decode(out[0].1.payload()).unwrap();
        assert_eq!(resp.token(), Some(7));
        assert_eq!((resp.port(), resp.channel()), (req.port(), req.channel()));
    }

    #[test]
    fn malformed_crtp_counts_error() {
        let mut d = DroneSim::new(DroneConfig::default(), Instant::ZERO).unwrap();
        // reserved header bits set
        let bad = SerialFrame::crtp(vec![0b0000_1100, 1, 2]).unwrap();
        assert!(d.handle_frame(&bad, Instant::ZERO).is_empty());
        assert_eq!(d.stats().decode_errors, 1);
    }

    #[test]
    fn watchdog_boundaries_and_recovery() {
        let mut d = DroneSim::new(DroneConfig::default(), Instant::ZERO).unwrap();
        d.handle_frame(&frame(make_setpoint(0.0, 0.0, 0.0, 500)), Instant::ZERO);
        d.watchdog_tick(Instant::from_millis(499));
        assert!(!d.state().failsafe_engaged);
        d.watchdog_tick(Instant::from_millis(501));
        assert!(d.state().failsafe_engaged);
        assert_eq!(d.effective_thrust(), 0);
        assert_eq!(d.first_failsafe(), Some(Instant::from_millis(501)));
        d.handle_frame(&frame(make_setpoint(0.0, 0.0, 0.0, 500)), Instant::from_millis(600));
        assert!(!d.state().failsafe_engaged);
        assert_eq!(d.watchdog_deadline(), Some(Instant::from_millis(1100)));
    }
}
