use std::io::{ErrorKind, Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use super::{valid_length, BridgeConfig, BridgeConfigError, BridgeStats, Flow, FlowStats};
use crate::clock::Clock;
use crate::link::PacketLink;
use crate::serial::{frame_encode, FrameDecoder, SerialFrame};
use crate::tracelab::{ChannelSink, TraceEvent, TraceSink};

const POLL: Duration = Duration::from_millis(10);
const STOP_TIMEOUT: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("{0} endpoint is closed")]
    EndpointClosed(&'static str),
    #[error(transparent)]
    Config(#[from] BridgeConfigError),
}

#[derive(Default)]
struct Counters {
    entered: AtomicU64,
    forwarded: AtomicU64,
    dropped: AtomicU64,
    decode_errors: AtomicU64,
    /// Queued plus in service; bounded by the queue capacity.
    in_system: AtomicUsize,
}

impl Counters {
    fn snapshot(&self) -> FlowStats {
        FlowStats {
            entered: self.entered.load(Ordering::SeqCst),
            forwarded: self.forwarded.load(Ordering::SeqCst),
            dropped_queue_full: self.dropped.load(Ordering::SeqCst),
            decode_errors: self.decode_errors.load(Ordering::SeqCst),
        }
    }

    /// Admits `crtp` into the flow queue or counts why it was refused.
    fn admit(&self, tx: &Sender<Vec<u8>>, crtp: Vec<u8>, cap: usize) -> bool {
        self.entered.fetch_add(1, Ordering::SeqCst);
        if !valid_length(&crtp) {
            self.decode_errors.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        if self.in_system.load(Ordering::SeqCst) >= cap {
            self.dropped.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        self.in_system.fetch_add(1, Ordering::SeqCst);
        if tx.send(crtp).is_err() {
            self.in_system.fetch_sub(1, Ordering::SeqCst);
            self.dropped.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        true
    }
}

struct Shared {
    stop_intake: AtomicBool,
    abort: AtomicBool,
    up: Counters,
    down: Counters,
}

pub struct BridgeHandle {
    shared: Arc<Shared>,
    intake: Vec<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    final_stats: Mutex<Option<BridgeStats>>,
}

impl BridgeHandle {
    pub fn stats(&self) -> BridgeStats {
        BridgeStats {
            uplink: self.shared.up.snapshot(),
            downlink: self.shared.down.snapshot(),
        }
    }

    /// Stops intake, lets both flows drain for up to 100 ms, then drops
    /// whatever is left. Later calls return the same stats.
    pub fn stop(&mut self) -> BridgeStats {
        if let Some(s) = *self.final_stats.lock().expect("stats lock") {
            return s;
        }
        self.shared.stop_intake.store(true, Ordering::SeqCst);
        for t in self.intake.drain(..) {
            let _ = t.join();
        }
        let start = std::time::Instant::now();
        while !self.workers.iter().all(|w| w.is_finished()) && start.elapsed() < STOP_TIMEOUT {
            std::thread::sleep(Duration::from_millis(1));
        }
        self.shared.abort.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        let stats = self.stats();
        *self.final_stats.lock().expect("stats lock") = Some(stats);
        stats
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn sink_for(trace: &Option<Sender<TraceEvent>>) -> Box<dyn TraceSink + Send> {
    match trace {
        Some(tx) => Box::new(ChannelSink(tx.clone())),
        None => Box::new(crate::tracelab::NullSink),
    }
}

/// Serves one flow queue until it disconnects or the bridge aborts. Items
/// left behind on abort count as dropped.
fn serve<F>(rx: Receiver<Vec<u8>>, counters: &Counters, shared: &Shared, processing: Duration, mut forward: F)
where
    F: FnMut(Vec<u8>) -> bool,
{
    loop {
        if shared.abort.load(Ordering::SeqCst) {
            let left = rx.try_iter().count() as u64;
            counters.dropped.fetch_add(left, Ordering::SeqCst);
            counters.in_system.fetch_sub(left as usize, Ordering::SeqCst);
            return;
        }
        match rx.recv_timeout(POLL) {
            Ok(crtp) => {
                if !processing.is_zero() {
                    std::thread::sleep(processing);
                }
                if forward(crtp) {
                    counters.forwarded.fetch_add(1, Ordering::SeqCst);
                } else {
                    counters.dropped.fetch_add(1, Ordering::SeqCst);
                }
                counters.in_system.fetch_sub(1, Ordering::SeqCst);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

/// Starts the four bridge threads: intake and worker for each flow.
///
/// `reader` must have a read timeout so the downlink intake can notice a stop.
pub fn run_bridge<L, R, W, C>(
    link: Arc<L>,
    mut reader: R,
    mut writer: W,
    cfg: BridgeConfig,
    clock: C,
    trace: Option<Sender<TraceEvent>>,
) -> Result<BridgeHandle, BridgeError>
where
    L: PacketLink + 'static,
    R: Read + Send + 'static,
    W: Write + Send + 'static,
    C: Clock + Clone + Send + 'static,
{
    cfg.validate()?;
    if !link.is_open() {
        return Err(BridgeError::EndpointClosed("transport"));
    }
    if writer.flush().is_err() {
        return Err(BridgeError::EndpointClosed("serial"));
    }
    let shared = Arc::new(Shared {
        stop_intake: AtomicBool::new(false),
        abort: AtomicBool::new(false),
        up: Counters::default(),
        down: Counters::default(),
    });
    let cap = cfg.queue_capacity;
    let processing = cfg.processing();
    let deadline = cfg.downstream_deadline();
    let (up_tx, up_rx) = crossbeam_channel::bounded::<Vec<u8>>(cap);
    let (down_tx, down_rx) = crossbeam_channel::bounded::<Vec<u8>>(cap);

    let uplink_intake = {
        let (shared, link, clock, mut sink) = (Arc::clone(&shared), Arc::clone(&link), clock.clone(), sink_for(&trace));
        std::thread::spawn(move || {
            while !shared.stop_intake.load(Ordering::SeqCst) {
                match link.recv_timeout(POLL) {
                    Ok(Some(crtp)) => {
                        let at = clock.now();
                        if shared.up.in_system.load(Ordering::SeqCst) < cap && valid_length(&crtp) {
                            sink.record(Flow::Uplink.entry_stage(), &crtp, at);
                        }
                        shared.up.admit(&up_tx, crtp, cap);
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        })
    };
    let downlink_intake = {
        let (shared, clock, mut sink) = (Arc::clone(&shared), clock.clone(), sink_for(&trace));
        std::thread::spawn(move || {
            let mut decoder = FrameDecoder::new();
            let mut buf = [0u8; 256];
            while !shared.stop_intake.load(Ordering::SeqCst) {
                let n = match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                    Err(_) => break,
                };
                for frame in decoder.push(&buf[..n]) {
                    let crtp = frame.into_payload();
                    let at = clock.now();
                    if shared.down.in_system.load(Ordering::SeqCst) < cap && valid_length(&crtp) {
                        sink.record(Flow::Downlink.entry_stage(), &crtp, at);
                    }
                    shared.down.admit(&down_tx, crtp, cap);
                }
            }
        })
    };
    let uplink_worker = {
        let (shared, clock, mut sink) = (Arc::clone(&shared), clock.clone(), sink_for(&trace));
        std::thread::spawn(move || {
            serve(up_rx, &shared.up, &shared, processing, |crtp| {
                let Ok(frame) = SerialFrame::crtp(crtp) else {
                    return false;
                };
                sink.record(Flow::Uplink.exit_stage(), frame.payload(), clock.now());
                writer.write_all(&frame_encode(&frame)).and_then(|_| writer.flush()).is_ok()
            });
        })
    };
    let downlink_worker = {
        let (shared, clock, mut sink) = (Arc::clone(&shared), clock, sink_for(&trace));
        std::thread::spawn(move || {
            serve(down_rx, &shared.down, &shared, processing, |crtp| {
                sink.record(Flow::Downlink.exit_stage(), &crtp, clock.now());
                link.send(&crtp, deadline).is_ok()
            });
        })
    };
    Ok(BridgeHandle {
        shared,
        intake: vec![uplink_intake, downlink_intake],
        workers: vec![uplink_worker, downlink_worker],
        final_stats: Mutex::new(None),
    })
}
