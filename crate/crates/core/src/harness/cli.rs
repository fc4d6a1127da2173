//! Command-line front end. Exit codes: 0 clean run, 1 invariant violation or
//! internal failure, 2 usage, configuration or I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::metrics::compute_from_text;
use super::scenario::{load_scenario, seconds, Scenario, ScenarioError};
use super::sweep::sweep;
use super::world::run;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hm-sim", version, about = "Health-monitoring ECU simulator for CAN networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write events.log, audit.log, telematics.ndrec and report.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the horizon, in seconds.
        #[arg(long)]
        until: Option<f64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the bus bitrate, in bit/s.
        #[arg(long)]
        bitrate: Option<u32>,
    },
    /// Move the scenario's single fault across an onset range and summarise detection latency.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// First onset, in seconds.
        #[arg(long)]
        onset_start: f64,
        /// End of the onset range (exclusive), in seconds.
        #[arg(long)]
        onset_end: f64,
        /// Onset step, in seconds.
        #[arg(long, default_value_t = 0.001)]
        step: f64,
    },
    /// Recompute report.json from the logs of an earlier run.
    Metrics {
        /// Directory holding events.log and audit.log.
        #[arg(long)]
        log: PathBuf,
    },
}

fn usage(err: &mut dyn Write, msg: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error: {msg}");
    EXIT_USAGE
}

fn time_arg(name: &str, s: f64) -> Result<crate::simcore::SimTime, String> {
    seconds(s).ok_or_else(|| format!("--{name} must be a non-negative number of seconds"))
}

fn load(path: &Path, err: &mut dyn Write) -> Result<Scenario, i32> {
    load_scenario(path).map_err(|e: ScenarioError| usage(err, e))
}

/// Parse `args` (including the program name) and execute.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    match cli.command {
        Command::Run { scenario, seed, until, out: dir, bitrate } => {
            let mut sc = match load(&scenario, err) {
                Ok(sc) => sc,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(u) = until {
                match time_arg("until", u) {
                    Ok(t) => sc.horizon = t,
                    Err(m) => return usage(err, m),
                }
            }
            if let Some(b) = bitrate {
                sc.bus.bitrate = b;
            }
            if let Err(e) = sc.validate() {
                return usage(err, format!("{}: {e}", scenario.display()));
            }
            let result = match run(&sc) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return EXIT_VIOLATION;
                }
            };
            if let Err(e) = result.write_to(&dir) {
                return usage(err, format!("cannot write to {}: {e}", dir.display()));
            }
            let r = &result.report;
            let _ = writeln!(
                out,
                "{} ECUs, {}s: {} polls, {} escalations, bus {:.3}%, outputs in {}",
                r.fleet_size,
                r.horizon_us as f64 / 1e6,
                r.traffic.polls,
                result.audit.len(),
                r.utilization.overall * 100.0,
                dir.display()
            );
            for v in &r.violations {
                let _ = writeln!(err, "violation: {v}");
            }
            if r.violations.is_empty() {
                EXIT_OK
            } else {
                EXIT_VIOLATION
            }
        }
        Command::Sweep { scenario, onset_start, onset_end, step } => {
            let sc = match load(&scenario, err) {
                Ok(sc) => sc,
                Err(code) => return code,
            };
            let range = time_arg("onset-start", onset_start)
                .and_then(|a| time_arg("onset-end", onset_end).map(|b| (a, b)))
                .and_then(|(a, b)| time_arg("step", step).map(|s| (a, b, s)));
            let (a, b, s) = match range {
                Ok(r) => r,
                Err(m) => return usage(err, m),
            };
            let summary = match sweep(&sc, a, b, s) {
                Ok(x) => x,
                Err(e) => return usage(err, e),
            };
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            let over = summary.max_latency_us.is_some_and(|m| m > summary.bound_us);
            if over || summary.violations > 0 {
                EXIT_VIOLATION
            } else {
                EXIT_OK
            }
        }
        Command::Metrics { log } => {
            let read = |name: &str| {
                std::fs::read_to_string(log.join(name))
                    .map_err(|e| format!("cannot read {}: {e}", log.join(name).display()))
            };
            let (events, audit) = match read("events.log").and_then(|e| read("audit.log").map(|a| (e, a))) {
                Ok(x) => x,
                Err(m) => return usage(err, m),
            };
            let report = match compute_from_text(&events, &audit) {
                Ok(r) => r,
                Err(e) => return usage(err, e),
            };
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            for v in &report.violations {
                let _ = writeln!(err, "violation: {v}");
            }
            if report.violations.is_empty() {
                EXIT_OK
            } else {
                EXIT_VIOLATION
            }
        }
    }
}
