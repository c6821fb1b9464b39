use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dronelink::harness::{self, ConfigError, HarnessError, ScenarioConfig};

/// Exit codes by failure category.
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(name = "dronelink", version, about = "Drone control-link testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in virtual time and write its artifacts.
    Run {
        /// Scenario TOML file, or the name of a bundled scenario.
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory; defaults to runs/<scenario>-seed<N>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the CDF and stage-statistics files.
        #[arg(long)]
        analyze: bool,
    },
    /// Compute CDFs and stage statistics for an artifact directory.
    Analyze { dir: PathBuf },
    /// Merge the CDFs of several artifact directories into one table.
    Compare {
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Run a scenario in real time over loopback UDP with threaded components.
    Live {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the request count.
        #[arg(long)]
        requests: Option<u32>,
        /// Keep the scenario's setpoint-only flight phase.
        #[arg(long)]
        with_flight: bool,
    },
    /// List the bundled scenarios.
    Scenarios,
}

fn load(config: &str) -> Result<ScenarioConfig, HarnessError> {
    let path = Path::new(config);
    if path.exists() {
        Ok(ScenarioConfig::load(path)?)
    } else if ScenarioConfig::bundled_names().any(|n| n == config) {
        Ok(ScenarioConfig::bundled(config)?)
    } else {
        Err(ConfigError::Read {
            path: config.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or bundled scenario"),
        }
        .into())
    }
}

fn default_out(cfg: &ScenarioConfig) -> PathBuf {
    Path::new("runs").join(cfg.run_id())
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Usage(_) => EXIT_USAGE,
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::Export(_) | HarnessError::PacketLog(_) | HarnessError::Io { .. } | HarnessError::Schema { .. } => {
            EXIT_DATA
        }
        HarnessError::Desk(_) => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            analyze,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let out = out.unwrap_or_else(|| default_out(&cfg));
            let report = harness::run_scenario(&cfg, &out)?;
            let median = report.summary.rtt.as_ref().map(|p| p.median_us / 1000.0);
            println!(
                "{}: {}/{} requests answered, median RTT {} -> {}",
                cfg.name,
                report.summary.requests_answered,
                report.summary.requests_configured,
                median.map_or("n/a".to_string(), |m| format!("{m:.3} ms")),
                out.display()
            );
            if let Some(e) = &report.summary.controller_error {
                println!("controller: {e}");
            }
            if analyze {
                harness::analyze(&out)?;
            }
        }
        Command::Analyze { dir } => {
            let a = harness::analyze(&dir)?;
            println!(
                "{}: {} IPT samples, {} RTT samples, {} complete traces",
                dir.display(),
                a.ipt_us.len(),
                a.rtt_us.len(),
                a.complete_traces
            );
            for (name, s) in &a.stages {
                println!("  {name:<20} median {:>9.1} us  q1 {:>9.1}  q3 {:>9.1}", s.median, s.q1, s.q3);
            }
        }
        Command::Compare { dirs, out } => {
            harness::compare(&dirs, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Live {
            config,
            out,
            requests,
            with_flight,
        } => {
            let mut cfg = load(&config)?;
            if let Some(n) = requests {
                cfg.workload.request_count = n;
            }
            if !with_flight {
                cfg.workload.flight_phase_ms = 0;
            }
            let out = out.unwrap_or_else(|| Path::new("runs").join(format!("{}-live", cfg.name)));
            let report = harness::run_live(&cfg, &out)?;
            let median = report.summary.rtt.as_ref().map(|p| p.median_us / 1000.0);
            println!(
                "{} (live): {}/{} requests answered, median RTT {} -> {}",
                cfg.name,
                report.summary.requests_answered,
                report.summary.requests_configured,
                median.map_or("n/a".to_string(), |m| format!("{m:.3} ms")),
                out.display()
            );
        }
        Command::Scenarios => {
            for name in ScenarioConfig::bundled_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRONELINK_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
