//! Command-line surface: scene synthesis, flow estimation with the
//! contrast-maximization solver or the spiking network, training, evaluation
//! and flow visualization.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<aqflow_core::Error> for CliError {
    fn from(e: aqflow_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Cm,
    Snn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Binary,
}

#[derive(Debug, Parser)]
#[command(name = "aqflow", version, about = "Event-camera optical flow by contrast maximization")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for the scene simulator and network initialisation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "cm")]
    pub method: Method,
    /// Pin the scaling rate to zero.
    #[arg(long, global = true)]
    pub no_phi: bool,
    /// Weight of the L0 term.
    #[arg(long, global = true)]
    pub lambda0: Option<f64>,
    /// Event file format written by `synth`.
    #[arg(long, global = true, value_enum, default_value = "binary")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scene; writes events and ground-truth flow per partition.
    Synth,
    /// Estimate flow per partition.
    Estimate {
        #[arg(long)]
        events: PathBuf,
        /// Network checkpoint, for `--method snn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the spiking network; synthesizes the configured scene when no
    /// events are given.
    Train {
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Compare estimated flow against a reference and report metrics.
    Eval {
        /// Directory of estimated flow rasters.
        #[arg(long)]
        flow: PathBuf,
        /// Directory of reference flow rasters with matching names.
        #[arg(long)]
        reference: PathBuf,
        /// Events the flow was estimated from; enables FWL, RSAT and the
        /// event mask.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Network checkpoint; enables firing rate, op and energy figures.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render flow rasters as color-wheel images and scaling maps as heatmaps.
    Viz {
        /// A raster file or a directory of them.
        #[arg(long)]
        flow: PathBuf,
        /// Magnitude at full saturation, px; the 99th percentile when absent.
        #[arg(long)]
        max_mag: Option<f64>,
        #[arg(long)]
        png: bool,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: g.seed,
        no_phi: g.no_phi,
        lambda0: g.lambda0,
    });
    cfg.validate()?;
    let out = g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    match &cli.command {
        Command::Viz { .. } => {}
        _ => std::fs::write(out.join("config.toml"), cfg.to_toml())?,
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out, g.format),
        Command::Estimate { events, checkpoint } => commands::estimate(&cfg, &out, &events, g.method, checkpoint.as_deref()),
        Command::Train { events } => commands::train(&cfg, &out, events.as_deref()),
        Command::Eval {
            flow,
            reference,
            events,
            checkpoint,
        } => commands::eval(&cfg, &out, &flow, &reference, events.as_deref(), checkpoint.as_deref()),
        Command::Viz { flow, max_mag, png } => commands::viz(&out, &flow, max_mag, png),
    }
}
