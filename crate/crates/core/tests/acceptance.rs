//! The ten acceptance criteria, one PASS/FAIL line each.
//!
//! Runs with its own main so the report is always printed. Exits nonzero if
//! any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant as WallInstant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dronelink::chansim::ChannelConfig;
use dronelink::clock::Instant;
use dronelink::controller::Direction;
use dronelink::crtp::{CrtpPacket, PacketKind};
use dronelink::harness::{analyze, run_desk, run_scenario, ScenarioConfig};
use dronelink::serial::{frame_decode, frame_encode, SerialFrame};
use dronelink::tracelab::{ipt, quantile, rtt, stage_decompose, Stage};
use dronelink::transport::testbed::Testbed;
use dronelink::transport::{
    build_parity, decode_segment, encode_segment, recover_from_parity, select_redundancy, Deadline, ExpiryMode,
    SegmentKind, TransportConfig, TransportSegment,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(samples: &[u64]) -> f64 {
    let mut s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5).expect("nonempty")
}

fn bundled(name: &str) -> ScenarioConfig {
    ScenarioConfig::bundled(name).expect("bundled scenario")
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    for (name, lo, hi) in [("c-rust", 8.0, 10.0), ("b-python", 16.0, 20.0), ("a-radio", 3.5, 4.5)] {
        let cfg = bundled(name);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let started = WallInstant::now();
        let report = run_scenario(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let analysis = analyze(dir.path()).map_err(|e| e.to_string())?;
        let wall = started.elapsed();
        ensure(
            report.run.requests_answered == 500 && analysis.rtt_us.len() == 500,
            format!("{name}: {} exchanges, want 500", analysis.rtt_us.len()),
        )?;
        ensure(wall < Duration::from_secs(10), format!("{name}: took {wall:?}"))?;
        let m = median(&analysis.rtt_us) / 1000.0;
        ensure(
            (lo..=hi).contains(&m),
            format!("{name}: median RTT {m:.3} ms outside [{lo}, {hi}]"),
        )?;
        notes.push(format!("{name} {m:.2} ms"));
        if name == "b-python" {
            let residence = analysis.stage("bridge_residence").ok_or("no bridge_residence")?.median / 1000.0;
            let transport = analysis.stage("transport_roundtrip").ok_or("no transport_roundtrip")?.median / 1000.0;
            ensure(
                (9.0..=13.0).contains(&residence),
                format!("b-python: bridge+serial residence {residence:.3} ms outside [9, 13]"),
            )?;
            ensure(
                transport < 7.0,
                format!("b-python: transport round trip {transport:.3} ms, want < 7"),
            )?;
            notes.push(format!("(residence {residence:.2} ms, transport {transport:.2} ms)"));
        }
    }
    Ok(notes.join(", "))
}

fn criterion_2() -> Outcome {
    let cfg = bundled("c-rust");
    let run = run_desk(&cfg).map_err(|e| e.to_string())?;
    let ipts = ipt(&run.log);
    let outs: Vec<_> = run.log.iter().filter(|r| r.direction == Direction::Out).collect();
    let setpoints = outs.iter().filter(|r| r.kind == PacketKind::Setpoint).count();
    let in_step = ipts.iter().filter(|&&v| (199_000..=201_000).contains(&v)).count();
    let fraction = in_step as f64 / ipts.len() as f64;
    let bound = 0.9 * (setpoints - 1) as f64 / (outs.len() - 1) as f64;
    ensure(
        fraction >= bound,
        format!("fraction in [199, 201] ms {fraction:.4} < {bound:.4}"),
    )?;
    let floor = *rtt(&run.log).iter().min().ok_or("no RTT samples")?;
    let requests: Vec<u64> = outs
        .iter()
        .filter(|r| r.kind == PacketKind::Request)
        .map(|r| r.timestamp.as_micros())
        .collect();
    let below = requests.windows(2).filter(|w| w[1] - w[0] < floor).count();
    ensure(below == 0, format!("{below} request-series IPTs below the RTT floor {floor} us"))?;
    Ok(format!(
        "{in_step}/{} IPTs in [199, 201] ms ({fraction:.3} >= {bound:.3}), request IPT floor {floor} us",
        ipts.len()
    ))
}

/// Centre of the densest 2 ms window among samples above `from`.
fn secondary_mode(samples: &[u64], from: u64) -> Option<f64> {
    let mut tail: Vec<u64> = samples.iter().copied().filter(|&v| v > from).collect();
    tail.sort_unstable();
    let mut best: Option<(usize, f64)> = None;
    for (i, &start) in tail.iter().enumerate() {
        let inside = &tail[i..tail.partition_point(|&v| v <= start + 2_000)];
        let centre = (inside[0] + inside[inside.len() - 1]) as f64 / 2.0;
        if best.is_none_or(|(n, _)| inside.len() > n) {
            best = Some((inside.len(), centre));
        }
    }
    best.map(|(_, c)| c)
}

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    for name in ["c-rust", "a-radio"] {
        let base_cfg = bundled(name);
        let base_run = run_desk(&base_cfg).map_err(|e| e.to_string())?;
        let base = median(&rtt(&base_run.log));
        let mut cfg = base_cfg.clone();
        cfg.channel = ChannelConfig {
            loss_prob: 0.05,
            ..cfg.channel
        };
        cfg.workload.request_timeout_ms = 50;
        cfg.workload.flight_phase_ms = 0;
        let run = run_desk(&cfg).map_err(|e| e.to_string())?;
        let samples = rtt(&run.log);
        let mode = secondary_mode(&samples, base as u64 + 25_000).ok_or(format!("{name}: no resend tail"))?;
        let offset = (mode - base) / 1000.0;
        ensure(
            (48.0..=52.0).contains(&offset),
            format!("{name}: secondary mode at base + {offset:.2} ms"),
        )?;
        let p = samples.iter().filter(|&&v| v as f64 > base + 40_000.0).count() as f64 / samples.len() as f64;
        ensure(
            (0.05..=0.15).contains(&p),
            format!("{name}: P(RTT > base + 40 ms) = {p:.3}"),
        )?;
        notes.push(format!("{name} mode base+{offset:.1} ms, P={p:.3}"));
    }
    Ok(notes.join(", "))
}

fn criterion_4() -> Outcome {
    let mut complete = 0;
    let mut radio = 0;
    let mut lossy = bundled("c-rust");
    lossy.channel.loss_prob = 0.05;
    lossy.workload.flight_phase_ms = 0;
    let configs = [bundled("c-rust"), bundled("b-python"), bundled("a-radio"), lossy];
    for cfg in &configs {
        let run = run_desk(cfg).map_err(|e| e.to_string())?;
        for t in &run.traces {
            match stage_decompose(t) {
                Ok(d) => {
                    complete += 1;
                    ensure(
                        d.end_to_end == d.transport_roundtrip + d.bridge_residence,
                        format!("{}: identity broken for token {}", cfg.name, t.token),
                    )?;
                    ensure(
                        d.drone_processing == 100,
                        format!("{}: drone processing {} us", cfg.name, d.drone_processing),
                    )?;
                }
                Err(_) => {
                    if let (Some(rx), Some(tx)) = (t.get(Stage::DroneRx), t.get(Stage::DroneTx)) {
                        radio += 1;
                        ensure(
                            tx.as_micros() - rx.as_micros() == 100,
                            format!("{}: drone processing off for token {}", cfg.name, t.token),
                        )?;
                    }
                }
            }
        }
    }
    ensure(complete > 1000, format!("only {complete} complete traces"))?;
    Ok(format!("{complete} complete traces exact, {radio} radio traces at 100 us"))
}

/// Probability that every copy is lost, by summing over all 2^copies outcomes.
fn enumerate_residual(p: f64, copies: u32) -> f64 {
    (0u32..1 << copies)
        .map(|mask| {
            let lost = (0..copies).filter(|i| mask & (1 << i) != 0).count() as i32;
            let prob = p.powi(lost) * (1.0 - p).powi(copies as i32 - lost);
            if lost == copies as i32 {
                prob
            } else {
                0.0
            }
        })
        .sum()
}

fn criterion_5() -> Outcome {
    for p in [0.05, 0.1, 0.2, 0.5] {
        for copies in 1..=4u32 {
            let cfg = TransportConfig {
                max_proactive_copies: copies,
                target_residual_loss: 1e-12,
                ..TransportConfig::default()
            };
            let plan = select_redundancy(p, &cfg, 10.0, Deadline::from_millis(20));
            ensure(plan.proactive_copies == copies, format!("p={p}: {} copies, want {copies}", plan.proactive_copies))?;
            let oracle = enumerate_residual(p, copies);
            ensure(
                (plan.predicted_residual - oracle).abs() <= 1e-12 * oracle.max(1e-300),
                format!("p={p} copies={copies}: {} vs oracle {oracle}", plan.predicted_residual),
            )?;
        }
    }
    let n = 100_000u32;
    let channel = |seed| ChannelConfig {
        loss_prob: 0.1,
        seed,
        ..ChannelConfig::default()
    };
    let mut tb = Testbed::new(TransportConfig::default(), channel(501), channel(502), ExpiryMode::DropExpired)
        .map_err(|e| e.to_string())?;
    for i in 0..n {
        let mut payload = i.to_be_bytes().to_vec();
        payload.resize(20, 0);
        tb.schedule_send(Instant::from_millis(i as u64), payload, Deadline::NONE);
    }
    tb.run_to_quiescence(Instant::from_millis(n as u64 + 120_000))
        .map_err(|e| e.to_string())?;
    let fraction = tb.delivered.len() as f64 / n as f64;
    ensure(fraction >= 0.999, format!("delivered fraction {fraction}"))?;
    Ok(format!("16 oracle cases exact, Monte-Carlo delivered {fraction:.5}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for k in 2..=4usize {
        for _ in 0..200 {
            let group: Vec<Vec<u8>> = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..=64);
                    (0..len).map(|_| rng.random()).collect()
                })
                .collect();
            let parity = build_parity(&group).map_err(|e| e.to_string())?;
            for drop in 0..k {
                let present: Vec<Option<&Vec<u8>>> =
                    group.iter().enumerate().map(|(i, p)| (i != drop).then_some(p)).collect();
                let rebuilt = recover_from_parity(&present, &parity, drop).map_err(|e| e.to_string())?;
                let orig = &group[drop];
                ensure(
                    rebuilt[..orig.len()] == orig[..] && rebuilt[orig.len()..].iter().all(|&b| b == 0),
                    format!("k={k}: drop {drop} not recovered"),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} single-drop recoveries, 0 failures"))
}

fn random_segment(rng: &mut ChaCha8Rng) -> TransportSegment {
    let kind = [SegmentKind::Data, SegmentKind::Parity, SegmentKind::Feedback][rng.random_range(0..3)];
    let k: u8 = rng.random_range(1..=254);
    let (n, index) = match kind {
        SegmentKind::Data => {
            let n = if rng.random() { k } else { k + 1 };
            (n, rng.random_range(0..k))
        }
        SegmentKind::Parity => (k + 1, k),
        SegmentKind::Feedback => (k, rng.random_range(0..k)),
    };
    let len = rng.random_range(0..=200);
    TransportSegment {
        kind,
        seq: rng.random(),
        group_id: rng.random(),
        group_index: index,
        k,
        n,
        send_ts_us: rng.random(),
        deadline: Deadline::from_wire(rng.random()),
        payload: (0..len).map(|_| rng.random()).collect(),
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let len = rng.random_range(0..=30);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let p = CrtpPacket::new(rng.random_range(0..16), rng.random_range(0..4), payload).map_err(|e| e.to_string())?;
        ensure(CrtpPacket::decode(&p.encode()).as_ref() == Ok(&p), format!("crtp mismatch at {i}"))?;

        let seg = random_segment(&mut rng);
        let bytes = encode_segment(&seg).map_err(|e| format!("segment {i}: {e}"))?;
        ensure(decode_segment(&bytes).as_ref() == Ok(&seg), format!("segment mismatch at {i}"))?;

        let len = rng.random_range(0..=32);
        let frame = SerialFrame::new(rng.random(), (0..len).map(|_| rng.random()).collect()).map_err(|e| e.to_string())?;
        let out = frame_decode(&frame_encode(&frame));
        ensure(out.frames == [frame.clone()] && out.remainder.is_empty(), format!("frame mismatch at {i}"))?;
    }
    let mut resyncs = 0;
    for garbage_len in 0..=64usize {
        for _ in 0..20 {
            let frames: Vec<SerialFrame> = (0..3)
                .map(|_| {
                    let len = rng.random_range(1..=31);
                    SerialFrame::crtp((0..len).map(|_| rng.random()).collect()).expect("fits")
                })
                .collect();
            let mut stream: Vec<u8> = (0..garbage_len).map(|_| rng.random()).collect();
            for f in &frames {
                stream.extend(frame_encode(f));
            }
            let out = frame_decode(&stream);
            ensure(
                out.frames.ends_with(&frames),
                format!("resync failed after {garbage_len} garbage bytes"),
            )?;
            resyncs += 1;
        }
    }
    Ok(format!("3 x 10^4 codec round trips, {resyncs} resyncs, 0 mismatches"))
}

fn criterion_8() -> Outcome {
    let rate = 1_000_000u64;
    let cfg = TransportConfig {
        bottleneck_rate_bps: rate,
        ..TransportConfig::default()
    };
    let quiet = ChannelConfig::default();
    let mut tb = Testbed::new(cfg, quiet.clone(), quiet, ExpiryMode::DropExpired).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10_000u64 {
        let len = rng.random_range(20..=400);
        tb.schedule_send(Instant::from_micros(i * 10), vec![0xA5; len], Deadline::NONE);
    }
    tb.run_to_quiescence(Instant::from_millis(600_000)).map_err(|e| e.to_string())?;
    let r = &tb.releases;
    ensure(r.len() >= 10_000, format!("only {} releases", r.len()))?;
    let mut worst: f64 = 0.0;
    for w in r.windows(100) {
        // the last release of the window opens the next gap, so it is not counted
        let bits: u64 = w[..99].iter().map(|x| x.bytes as u64 * 8).sum();
        let span = (w[99].at - w[0].at).as_secs_f64();
        let ratio = bits as f64 / (rate as f64 * span);
        worst = worst.max(ratio);
    }
    ensure(worst <= 1.01, format!("window rate {worst:.4} x bottleneck"))?;
    Ok(format!("{} releases, worst 100-segment window {worst:.4} x bottleneck", r.len()))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("artifact dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).expect("readable"),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let mut files = 0;
    for name in ScenarioConfig::bundled_names() {
        let cfg = bundled(name);
        let (a, b) = (
            tempfile::tempdir().map_err(|e| e.to_string())?,
            tempfile::tempdir().map_err(|e| e.to_string())?,
        );
        for d in [&a, &b] {
            run_scenario(&cfg, d.path()).map_err(|e| e.to_string())?;
            analyze(d.path()).map_err(|e| e.to_string())?;
        }
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        ensure(ta == tb, format!("{name}: artifact trees differ"))?;
        files += ta.len();
    }
    Ok(format!("{files} artifact files byte-identical across repeated runs"))
}

fn criterion_10() -> Outcome {
    let cfg = bundled("c-rust");
    let run = run_desk(&cfg).map_err(|e| e.to_string())?;
    ensure(run.failsafe_at.is_none(), format!("failsafe engaged at {:?}", run.failsafe_at))?;
    let mut halted = cfg.clone();
    halted.workload.halt_at_ms = Some(1000);
    let run = run_desk(&halted).map_err(|e| e.to_string())?;
    let last = run.last_setpoint_at_drone.ok_or("no setpoint reached the drone")?;
    let at = run.failsafe_at.ok_or("failsafe never engaged")?;
    ensure(
        at == last + Duration::from_millis(500),
        format!("failsafe at {at}, last setpoint {last}"),
    )?;
    Ok(format!("loss-free run clean; halted run: last setpoint {last}, failsafe {at}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("scenario RTT reproduction", criterion_1),
        ("IPT step at 200 ms", criterion_2),
        ("resend tail", criterion_3),
        ("stage identity", criterion_4),
        ("redundancy oracle", criterion_5),
        ("parity recovery", criterion_6),
        ("codec suites", criterion_7),
        ("pacing", criterion_8),
        ("determinism", criterion_9),
        ("watchdog", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = WallInstant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {:>2} ({name}): {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} ({name}): {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
