//! Transport endpoint over a real UDP socket.
//!
//! The sans-IO [`Connection`] sits behind one mutex. A receive thread feeds
//! it datagrams; a timer thread sleeps until its next deadline (or until
//! poked through the condvar) and flushes paced transmissions. Application
//! threads call [`UdpEndpoint::send`] and the blocking or non-blocking recv.
//!
//! Segment timestamps come from the supplied clock; expiry checks are only
//! meaningful when both ends share a time base.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

use super::connection::{Connection, Delivery, ExpiryMode, SendReceipt, TransportError, TransportStats};
use super::redundancy::TransportConfig;
use super::segment::{Deadline, HEADER_LEN, MAX_SEGMENT_PAYLOAD};
use crate::clock::{Clock, SystemClock};
use crate::link::{LinkError, PacketLink};

const SOCKET_POLL: Duration = Duration::from_millis(20);
const MAX_IDLE_WAIT: Duration = Duration::from_millis(50);
const MIN_WAIT: Duration = Duration::from_micros(50);

struct State {
    conn: Connection,
    inbox: VecDeque<Delivery>,
    stopping: bool,
}

struct Shared {
    state: Mutex<State>,
    cond: Condvar,
    socket: UdpSocket,
    clock: SystemClock,
    mode: ExpiryMode,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Sends everything due and moves deliverable payloads to the inbox.
    fn pump(&self, st: &mut State) {
        let now = self.clock.now();
        while let Some(bytes) = st.conn.poll_transmit(now) {
            if let Err(e) = self.socket.send(&bytes) {
                debug!("udp send failed: {e}");
            }
        }
        let mut delivered = false;
        loop {
            match st.conn.recv(now, self.mode) {
                Ok(d) => {
                    st.inbox.push_back(d);
                    delivered = true;
                }
                Err(TransportError::WouldBlock) => break,
                Err(_) => break,
            }
        }
        if delivered {
            self.cond.notify_all();
        }
    }
}

pub struct UdpEndpoint {
    shared: Arc<Shared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl UdpEndpoint {
    /// Binds `local`, talks only to `peer`.
    pub fn bind(
        local: SocketAddr,
        peer: SocketAddr,
        cfg: TransportConfig,
        mode: ExpiryMode,
        clock: SystemClock,
    ) -> Result<UdpEndpoint, LinkError> {
        Self::with_socket(UdpSocket::bind(local)?, peer, cfg, mode, clock)
    }

    /// Takes over an already bound socket, so both ends of a loopback pair
    /// can learn each other's address first.
    pub fn with_socket(
        socket: UdpSocket,
        peer: SocketAddr,
        cfg: TransportConfig,
        mode: ExpiryMode,
        clock: SystemClock,
    ) -> Result<UdpEndpoint, LinkError> {
        let conn = Connection::new(cfg)?;
        socket.connect(peer)?;
        socket.set_read_timeout(Some(SOCKET_POLL))?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                conn,
                inbox: VecDeque::new(),
                stopping: false,
            }),
            cond: Condvar::new(),
            socket,
            clock,
            mode,
        });
        let rx = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("transport-rx".into())
                .spawn(move || receive_loop(&shared))?
        };
        let timer = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("transport-timer".into())
                .spawn(move || timer_loop(&shared))?
        };
        Ok(UdpEndpoint {
            shared,
            threads: Mutex::new(vec![rx, timer]),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.shared.socket.local_addr()
    }

    pub fn send_with_deadline(&self, payload: &[u8], deadline: Deadline) -> Result<SendReceipt, TransportError> {
        let mut st = self.shared.lock();
        if st.stopping {
            return Err(TransportError::EndpointClosed);
        }
        let receipt = st.conn.send(self.shared.clock.now(), payload, deadline)?;
        self.shared.pump(&mut st);
        // the timer thread may need to wake earlier for paced copies
        self.shared.cond.notify_all();
        Ok(receipt)
    }

    /// Non-blocking receive.
    pub fn try_recv(&self) -> Result<Delivery, TransportError> {
        let mut st = self.shared.lock();
        if st.stopping {
            return Err(TransportError::EndpointClosed);
        }
        st.inbox.pop_front().ok_or(TransportError::WouldBlock)
    }

    /// Blocks up to `timeout`; `WouldBlock` when nothing arrived.
    pub fn recv_blocking(&self, timeout: Duration) -> Result<Delivery, TransportError> {
        let deadline = std::time::Instant::now() + timeout;
        let mut st = self.shared.lock();
        loop {
            if st.stopping {
                return Err(TransportError::EndpointClosed);
            }
            if let Some(d) = st.inbox.pop_front() {
                return Ok(d);
            }
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Err(TransportError::WouldBlock);
            }
            st = self
                .shared
                .cond
                .wait_timeout(st, left)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    pub fn stats(&self) -> TransportStats {
        self.shared.lock().conn.stats()
    }

    /// Stops the worker threads. Further calls fail with `EndpointClosed`.
    pub fn close(&self) {
        {
            let mut st = self.shared.lock();
            st.stopping = true;
            st.conn.close();
        }
        self.shared.cond.notify_all();
        let threads = std::mem::take(&mut *self.threads.lock().unwrap_or_else(|p| p.into_inner()));
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for UdpEndpoint {
    fn drop(&mut self) {
        self.close();
    }
}

impl PacketLink for UdpEndpoint {
    fn send(&self, payload: &[u8], deadline: Deadline) -> Result<(), LinkError> {
        self.send_with_deadline(payload, deadline)
            .map(|_| ())
            .map_err(|e| match e {
                TransportError::EndpointClosed => LinkError::Closed,
                e => e.into(),
            })
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError> {
        match self.recv_blocking(timeout) {
            Ok(d) => Ok(Some(d.payload)),
            Err(TransportError::WouldBlock) => Ok(None),
            Err(TransportError::EndpointClosed) => Err(LinkError::Closed),
            Err(e) => Err(e.into()),
        }
    }

    fn is_open(&self) -> bool {
        !self.shared.lock().stopping
    }
}

fn receive_loop(shared: &Shared) {
    let mut buf = vec![0u8; HEADER_LEN + MAX_SEGMENT_PAYLOAD + 64];
    loop {
        let received = shared.socket.recv(&mut buf);
        let mut st = shared.lock();
        if st.stopping {
            return;
        }
        match received {
            Ok(n) => {
                let now = shared.clock.now();
                if let Err(e) = st.conn.handle_datagram(now, &buf[..n]) {
                    debug!("dropping datagram: {e}");
                }
                shared.pump(&mut st);
                shared.cond.notify_all();
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            // connected UDP reports ICMP unreachable here; the peer may not be up yet
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {}
            Err(e) => {
                warn!("udp receive failed: {e}");
                drop(st);
                std::thread::sleep(SOCKET_POLL);
            }
        }
    }
}

fn timer_loop(shared: &Shared) {
    let mut st = shared.lock();
    loop {
        if st.stopping {
            return;
        }
        let now = shared.clock.now();
        st.conn.handle_timeout(now);
        shared.pump(&mut st);
        let wait = match st.conn.poll_timeout() {
            Some(t) => shared
                .clock
                .to_std(t)
                .saturating_duration_since(std::time::Instant::now())
                .min(MAX_IDLE_WAIT),
            None => MAX_IDLE_WAIT,
        };
        // a floor on the wait keeps a timer that is due but idle from spinning
        st = shared
            .cond
            .wait_timeout(st, wait.max(MIN_WAIT))
            .unwrap_or_else(|p| p.into_inner())
            .0;
    }
}
