use std::io::{Read, Write};
use std::sync::Arc;
use std::time::{Duration, Instant as WallInstant};

use dronelink::bridge::{run_bridge, BridgeConfig, BridgeStats};
use dronelink::clock::SystemClock;
use dronelink::crtp::{make_request, make_response};
use dronelink::link::{MemLink, PacketLink};
use dronelink::serial::{frame_encode, FrameDecoder, MemSerial, SerialFrame};
use dronelink::transport::Deadline;

fn read_frames(port: &mut MemSerial, want: usize, within: Duration) -> Vec<SerialFrame> {
    let mut dec = FrameDecoder::new();
    let mut frames = Vec::new();
    let mut buf = [0u8; 256];
    let start = WallInstant::now();
    while frames.len() < want && start.elapsed() < within {
        if let Ok(n) = port.read(&mut buf) {
            frames.extend(dec.push(&buf[..n]));
        }
    }
    frames
}

fn conserved(s: &BridgeStats) -> bool {
    [s.uplink, s.downlink]
        .iter()
        .all(|f| f.entered == f.forwarded + f.dropped_queue_full + f.decode_errors)
}

#[test]
fn forwards_both_directions_byte_exact_and_in_order() {
    let (controller, bridge_side) = MemLink::pair();
    let (bridge_serial, mut device) = MemSerial::pair(Duration::from_millis(10));
    let mut bridge = run_bridge(
        Arc::new(bridge_side),
        bridge_serial.try_clone(),
        bridge_serial,
        BridgeConfig::default(),
        SystemClock::new(),
        None,
    )
    .unwrap();

    let requests: Vec<_> = (0..20u8).map(|t| make_request(t, (t % 15) as usize)).collect();
    for r in &requests {
        controller.send(&r.encode(), Deadline::NONE).unwrap();
    }
    let frames = read_frames(&mut device, requests.len(), Duration::from_secs(5));
    let got: Vec<Vec<u8>> = frames.into_iter().map(SerialFrame::into_payload).collect();
    let sent: Vec<Vec<u8>> = requests.iter().map(|r| r.encode()).collect();
    assert_eq!(got, sent);

    for r in &requests {
        let frame = SerialFrame::crtp(make_response(r).encode()).unwrap();
        device.write_all(&frame_encode(&frame)).unwrap();
    }
    let mut back = Vec::new();
    let start = WallInstant::now();
    while back.len() < requests.len() && start.elapsed() < Duration::from_secs(5) {
        if let Some(p) = controller.recv_timeout(Duration::from_millis(50)).unwrap() {
            back.push(p);
        }
    }
    let expected: Vec<Vec<u8>> = requests.iter().map(|r| make_response(r).encode()).collect();
    assert_eq!(back, expected);

    let stats = bridge.stop();
    assert_eq!(stats.uplink_forwarded(), 20);
    assert_eq!(stats.downlink_forwarded(), 20);
    assert!(conserved(&stats));
}

#[test]
fn full_queue_drops_and_counts_are_conserved() {
    let (controller, bridge_side) = MemLink::pair();
    let (bridge_serial, mut device) = MemSerial::pair(Duration::from_millis(10));
    let cfg = BridgeConfig {
        queue_capacity: 1,
        per_packet_processing_ms: 30.0,
        ..BridgeConfig::default()
    };
    let mut bridge = run_bridge(
        Arc::new(bridge_side),
        bridge_serial.try_clone(),
        bridge_serial,
        cfg,
        SystemClock::new(),
        None,
    )
    .unwrap();
    for t in 0..10u8 {
        controller.send(&make_request(t, 4).encode(), Deadline::NONE).unwrap();
    }
    let frames = read_frames(&mut device, 1, Duration::from_secs(2));
    assert!(!frames.is_empty());
    let stats = bridge.stop();
    assert_eq!(stats.uplink.entered, 10);
    assert!(stats.dropped_queue_full() > 0, "{stats:?}");
    assert!(conserved(&stats), "{stats:?}");
}

#[test]
fn malformed_lengths_are_decode_errors() {
    let (controller, bridge_side) = MemLink::pair();
    let (bridge_serial, _device) = MemSerial::pair(Duration::from_millis(10));
    let mut bridge = run_bridge(
        Arc::new(bridge_side),
        bridge_serial.try_clone(),
        bridge_serial,
        BridgeConfig::default(),
        SystemClock::new(),
        None,
    )
    .unwrap();
    controller.send(&[], Deadline::NONE).unwrap();
    controller.send(&[0u8; 40], Deadline::NONE).unwrap();
    let start = WallInstant::now();
    while bridge.stats().uplink.entered < 2 && start.elapsed() < Duration::from_secs(2) {
        std::thread::sleep(Duration::from_millis(5));
    }
    let stats = bridge.stop();
    assert_eq!(stats.decode_errors(), 2);
    assert_eq!(stats.uplink_forwarded(), 0);
}

#[test]
fn stop_is_idempotent() {
    let (_controller, bridge_side) = MemLink::pair();
    let (bridge_serial, _device) = MemSerial::pair(Duration::from_millis(10));
    let mut bridge = run_bridge(
        Arc::new(bridge_side),
        bridge_serial.try_clone(),
        bridge_serial,
        BridgeConfig::default(),
        SystemClock::new(),
        None,
    )
    .unwrap();
    let first = bridge.stop();
    assert_eq!(bridge.stop(), first);
    assert_eq!(first, BridgeStats::default());
}
