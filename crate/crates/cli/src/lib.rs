//! Experiment runner behind the `segattn` binary.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use segattn::Error;

use config::{ExperimentConfig, Precision};
use report::{compare_csv, compare_rows, compare_table, latency_csv, latency_series};
use verify::{run_verify, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "segattn",
    version,
    about = "Partitioned Transformer inference simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    #[arg(long, global = true, default_value = "configs/default.toml")]
    pub config: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["unicast", "broadcast"])]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Run the equivalence, invariance and ledger suites.
    Verify,
    /// Emit the cost comparison table.
    Compare,
    /// Emit latency-versus-bandwidth series.
    Latency,
}

impl Cli {
    /// The config file with command-line overrides applied.
    pub fn load_config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse()?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.mode {
            cfg.mode = match m.as_str() {
                "broadcast" => config::Mode::Broadcast,
                _ => config::Mode::Unicast,
            };
        }
        Ok(cfg)
    }
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyReport, Error> {
    let section = cfg
        .verify
        .as_ref()
        .ok_or_else(|| Error::Config("missing [verify] section".into()))?;
    match cfg.precision {
        Precision::F64 => run_verify::<f64>(section, cfg.seed, cfg.mode.into()),
        Precision::F32 => run_verify::<f32>(section, cfg.seed, cfg.mode.into()),
    }
}

/// Returns the aligned table and the CSV text.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<(String, String), Error> {
    if cfg.compare.is_empty() {
        return Err(Error::Config("no [[compare]] sections".into()));
    }
    let rows = compare_rows(&cfg.compare)?;
    Ok((compare_table(&rows), compare_csv(&rows)?))
}

pub fn cmd_latency(cfg: &ExperimentConfig) -> Result<String, Error> {
    let section = cfg
        .latency
        .as_ref()
        .ok_or_else(|| Error::Config("missing [latency] section".into()))?;
    latency_csv(&latency_series(section)?)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(dir.join(name), text))
        .map_err(|e| Error::Config(format!("writing {}: {e}", dir.join(name).display())))
}

/// Runs one verb, prints to stdout and writes results under `out`.
/// Returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    match try_execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidLandmarkCount { .. } | Error::InvalidPlan(_) => EXIT_CONFIG,
                _ => EXIT_VERIFY_FAILED,
            }
        }
    }
}

fn try_execute(cli: &Cli) -> Result<i32, Error> {
    let cfg = cli.load_config()?;
    match cli.verb {
        Verb::Verify => {
            let report = cmd_verify(&cfg)?;
            let text = report.render();
            print!("{text}");
            write(&cfg.out, "verify.txt", &text)?;
            if report.passed() {
                Ok(EXIT_OK)
            } else {
                eprintln!("failed properties: {}", report.failures().join(", "));
                Ok(EXIT_VERIFY_FAILED)
            }
        }
        Verb::Compare => {
            let (table, csv) = cmd_compare(&cfg)?;
            print!("{table}");
            write(&cfg.out, "compare.txt", &table)?;
            write(&cfg.out, "compare.csv", &csv)?;
            Ok(EXIT_OK)
        }
        Verb::Latency => {
            let csv = cmd_latency(&cfg)?;
            print!("{csv}");
            write(&cfg.out, "latency.csv", &csv)?;
            Ok(EXIT_OK)
        }
    }
}
