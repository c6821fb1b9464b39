//! Scenario orchestration: runs a configured experiment in virtual time,
//! writes its artifacts and runs the analysis over them.
//!
//! Artifact directory layout:
//! - `packet_log.csv`: controller packet log
//! - `traces.csv`: per-request stage timestamps
//! - `summary.json`: RTT percentiles, IPT histogram and component counters
//! - `ipt_cdf.csv`, `rtt_cdf.csv`, `stage_stats.csv`: written by [`analyze`]

mod config;
mod desk;
mod live;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, PathKind, ScenarioConfig, StreamSeeds};
pub use desk::{run_desk, DeskCounters, DeskError, DeskRun};
pub use live::{assemble_live_traces, run_live, LiveReport, LiveSummary};

use crate::controller::{read_packet_log, write_packet_log, PacketLogError};
use crate::crtp::PacketKind;
use crate::tracelab::{
    boxstats, cdf, end_to_end, ipt, quantile, read_traces, rtt, stage_decompose, write_cdf, write_stage_stats,
    write_traces, CdfSeries, ExportError, StageStats, CDF_HEADER, INTERVAL_NAMES,
};

pub const PACKET_LOG_FILE: &str = "packet_log.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const IPT_CDF_FILE: &str = "ipt_cdf.csv";
pub const RTT_CDF_FILE: &str = "rtt_cdf.csv";
pub const STAGE_STATS_FILE: &str = "stage_stats.csv";

/// Upper bin edges of the IPT histogram, in microseconds. A final bin
/// collects everything above the last edge.
pub const IPT_BIN_EDGES_US: [u64; 10] = [
    1_000, 2_000, 5_000, 10_000, 20_000, 50_000, 100_000, 199_000, 201_000, 1_000_000,
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Desk(#[from] DeskError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    PacketLog(#[from] PacketLogError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub min_us: f64,
    pub p5_us: f64,
    pub p25_us: f64,
    pub median_us: f64,
    pub p75_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub mean_us: f64,
}

impl Percentiles {
    pub fn of(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let q = |p| quantile(&s, p).expect("nonempty");
        Some(Percentiles {
            count: s.len(),
            min_us: s[0],
            p5_us: q(0.05),
            p25_us: q(0.25),
            median_us: q(0.5),
            p75_us: q(0.75),
            p95_us: q(0.95),
            p99_us: q(0.99),
            max_us: s[s.len() - 1],
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive upper edge; `None` for the overflow bin.
    pub upper_us: Option<u64>,
    pub count: usize,
}

pub fn ipt_histogram(samples: &[u64]) -> Vec<HistogramBin> {
    let mut counts = vec![0usize; IPT_BIN_EDGES_US.len() + 1];
    for &v in samples {
        let i = IPT_BIN_EDGES_US.partition_point(|&edge| edge < v);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            upper_us: IPT_BIN_EDGES_US.get(i).copied(),
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub run_id: String,
    pub seed: u64,
    pub path: String,
    pub duration_us: u64,
    pub requests_configured: u32,
    pub requests_answered: u32,
    pub resends: u32,
    pub setpoints_sent: usize,
    pub out_packets: usize,
    pub controller_error: Option<String>,
    pub halted: bool,
    pub truncated: bool,
    pub failsafe_at_us: Option<u64>,
    pub rtt: Option<Percentiles>,
    pub ipt_histogram: Vec<HistogramBin>,
    pub counters: DeskCounters,
}

/// Outcome of [`run_scenario`].
#[derive(Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub summary: Summary,
    pub run: DeskRun,
}

pub fn summarize(cfg: &ScenarioConfig, run: &DeskRun) -> Summary {
    let ipts = ipt(&run.log);
    let outs = run
        .log
        .iter()
        .filter(|r| r.direction == crate::controller::Direction::Out);
    Summary {
        scenario: cfg.name.clone(),
        run_id: cfg.run_id(),
        seed: cfg.seed,
        path: cfg.path.as_str().to_string(),
        duration_us: run.end.as_micros(),
        requests_configured: cfg.workload.request_count,
        requests_answered: run.requests_answered,
        resends: run.resends,
        setpoints_sent: outs.clone().filter(|r| r.kind == PacketKind::Setpoint).count(),
        out_packets: outs.count(),
        controller_error: run.controller_error.as_ref().map(|e| e.to_string()),
        halted: run.halted,
        truncated: run.truncated,
        failsafe_at_us: run.failsafe_at.map(|t| t.as_micros()),
        rtt: Percentiles::of(&rtt(&run.log)),
        ipt_histogram: ipt_histogram(&ipts),
        counters: run.counters.clone(),
    }
}

/// Runs `cfg` in virtual time and writes its artifacts into `out`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let run = run_desk(cfg)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_packet_log(&out.join(PACKET_LOG_FILE), &cfg.run_id(), &run.log)?;
    write_traces(&out.join(TRACES_FILE), &run.traces)?;
    let summary = summarize(cfg, &run);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = out.join(SUMMARY_FILE);
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
    log::info!(
        "{}: {} of {} requests answered, median RTT {:?} us",
        cfg.name,
        run.requests_answered,
        cfg.workload.request_count,
        summary.rtt.as_ref().map(|p| p.median_us)
    );
    Ok(RunReport {
        dir: out.to_path_buf(),
        summary,
        run,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub ipt_us: Vec<u64>,
    pub rtt_us: Vec<u64>,
    /// Per-interval statistics in microseconds, in the canonical interval order.
    pub stages: Vec<(String, StageStats)>,
    pub complete_traces: usize,
}

impl Analysis {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

fn series(samples: &[u64]) -> CdfSeries {
    cdf(samples).unwrap_or(CdfSeries {
        values: Vec::new(),
        fractions: Vec::new(),
    })
}

/// Reads the packet log and traces in `dir` and writes the CDF and
/// stage-statistics files next to them. Running it again rewrites the same bytes.
pub fn analyze(dir: &Path) -> Result<Analysis, HarnessError> {
    let (_, log) = read_packet_log(&dir.join(PACKET_LOG_FILE))?;
    let traces = read_traces(&dir.join(TRACES_FILE))?;
    let ipt_us = ipt(&log);
    let rtt_us = rtt(&log);
    let mut samples: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut complete_traces = 0;
    for t in &traces {
        match stage_decompose(t) {
            Ok(d) => {
                complete_traces += 1;
                for (name, v) in INTERVAL_NAMES.iter().zip(d.values()) {
                    samples.entry(name).or_default().push(v as f64);
                }
            }
            Err(_) => {
                if let Ok(e2e) = end_to_end(t) {
                    samples.entry(INTERVAL_NAMES[0]).or_default().push(e2e as f64);
                }
            }
        }
    }
    let stages: Vec<(String, StageStats)> = INTERVAL_NAMES
        .iter()
        .filter_map(|name| {
            let s = samples.get(name)?;
            Some((name.to_string(), boxstats(s).ok()?))
        })
        .collect();
    write_cdf(&dir.join(IPT_CDF_FILE), &series(&ipt_us))?;
    write_cdf(&dir.join(RTT_CDF_FILE), &series(&rtt_us))?;
    write_stage_stats(&dir.join(STAGE_STATS_FILE), &stages)?;
    Ok(Analysis {
        ipt_us,
        rtt_us,
        stages,
        complete_traces,
    })
}

pub const COMPARE_HEADER: [&str; 4] = ["scenario", "metric", "value_us", "fraction"];

fn read_cdf_rows(path: &Path) -> Result<Vec<(String, String)>, HarnessError> {
    let schema = |message: String| HarnessError::Schema {
        path: path.display().to_string(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| schema(e.to_string()))?;
    let header = rd.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().ne(CDF_HEADER) {
        return Err(schema(format!("expected header {}", CDF_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, r) in rd.records().enumerate() {
        let r = r.map_err(|e| schema(format!("line {}: {e}", i + 2)))?;
        if r.len() != 2 || r[0].parse::<u64>().is_err() || r[1].parse::<f64>().is_err() {
            return Err(schema(format!("line {}: expected value_us,fraction", i + 2)));
        }
        rows.push((r[0].to_string(), r[1].to_string()));
    }
    Ok(rows)
}

fn scenario_label(dir: &Path) -> String {
    let from_summary = std::fs::read_to_string(dir.join(SUMMARY_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.get("scenario")?.as_str().map(str::to_string));
    from_summary.unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string())
    })
}

/// Combines the CDFs of several artifact directories into one long-format
/// table. Directories not yet analyzed are analyzed first. Repeated scenario
/// labels get a `#n` suffix.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<(), HarnessError> {
    if dirs.len() < 2 {
        return Err(HarnessError::Usage(format!(
            "compare needs at least 2 artifact directories, got {}",
            dirs.len()
        )));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut w = csv::Writer::from_path(out).map_err(|e| HarnessError::Schema {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let write_err = |e: csv::Error| HarnessError::Schema {
        path: out.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(COMPARE_HEADER).map_err(write_err)?;
    for dir in dirs {
        if !dir.join(IPT_CDF_FILE).exists() || !dir.join(RTT_CDF_FILE).exists() {
            analyze(dir)?;
        }
        let base = scenario_label(dir);
        let n = seen.entry(base.clone()).or_insert(0);
        *n += 1;
        let label = if *n == 1 { base } else { format!("{base}#{n}") };
        for (metric, file) in [("ipt", IPT_CDF_FILE), ("rtt", RTT_CDF_FILE)] {
            for (value, fraction) in read_cdf_rows(&dir.join(file))? {
                w.write_record([label.as_str(), metric, &value, &fraction])
                    .map_err(write_err)?;
            }
        }
    }
    w.flush().map_err(io_err(out))
}
