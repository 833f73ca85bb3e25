//! Library side of the `qswitch` command-line tool, so the commands can be
//! driven in-process by tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Format, RunConfig};
use output::{Emitter, Provenance};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(qswitch::Error),
    Io(std::io::Error),
    Other(String),
}

impl CliError {
    /// 2 for configuration or input errors, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(e) if e.is_nonconvergence() => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o: {e}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<qswitch::Error> for CliError {
    fn from(e: qswitch::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qswitch", version, about = "Superconducting SPDT switch simulation toolkit")]
pub struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `quantum.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Table format (overrides `format`).
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Four-port spectra at the resonant and off-resonant operating points.
    Sweep,
    /// Simulated |S12|² map against coil voltage and frequency.
    Fluxmap,
    /// Fit the flux model to a measured or simulated map.
    Fit {
        /// CSV with columns V1, V2, f_Hz, S12_sq; simulated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Duffing transmission against input power and the 1 dB compression point.
    Compression,
    /// Time-domain switching and 10 %–90 % edge times.
    Pulse,
    /// Photon routing: moments, g2, state reconstruction and Wigner functions.
    Photon,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Fluxmap => "fluxmap",
            Command::Fit { .. } => "fit",
            Command::Compression => "compression",
            Command::Pulse => "pulse",
            Command::Photon => "photon",
        }
    }
}

/// Applies command-line overrides to the loaded configuration.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.quantum.seed = seed;
    }
    if let Some(format) = cli.format {
        cfg.format = format;
    }
    Ok(cfg)
}

/// Runs one command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = effective_config(cli)?;
    let seed = cfg.quantum.seed;
    let provenance = Provenance::new(cli.command.name(), &cfg.canonical(), seed);
    let mut out = Emitter::new(&cfg.out_dir, cfg.format, provenance)?;
    match &cli.command {
        Command::Sweep => commands::sweep(&cfg, &mut out)?,
        Command::Fluxmap => commands::fluxmap(&cfg, &mut out)?,
        Command::Fit { dataset } => commands::fit(&cfg, dataset.as_deref(), seed, &mut out)?,
        Command::Compression => commands::compression(&cfg, &mut out)?,
        Command::Pulse => commands::pulse(&cfg, &mut out)?,
        Command::Photon => commands::photon(&cfg, seed, &mut out)?,
    }
    Ok(out.written().to_vec())
}
