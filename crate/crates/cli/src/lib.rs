//! Command-line front end: preprocess, train, predict, detect, eval and
//! export-attention over a flat key-value configuration.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use crossalarm_core::{Error, Result};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crossalarm", version, about = "Multivariate forecasting and early-warning alarms for drilling logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, resample, split and normalise a raw CSV.
    Preprocess(Common),
    /// Train on the preprocessed splits and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing checkpoint and append to its history.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast the test split with a sliding window.
    Predict(Common),
    /// Compute Risk, fit the warning threshold and report alarms.
    Detect(Common),
    /// Forecast metrics on val and test, with a persistence baseline.
    Eval(Common),
    /// Write attention weights for one test window.
    ExportAttention(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Preprocess(c) | Command::Predict(c) | Command::Detect(c) | Command::Eval(c) | Command::ExportAttention(c) => c,
            Command::Train { common, .. } => common,
        }
    }
}

/// Config file, then `CROSSALARM_SEED`, then `--set` flags.
pub fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli.command.common())?;
    match &cli.command {
        Command::Preprocess(_) => commands::preprocess(&cfg),
        Command::Train { resume, .. } => commands::train(&cfg, *resume),
        Command::Predict(_) => commands::predict(&cfg),
        Command::Detect(_) => commands::detect(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::ExportAttention(_) => commands::export_attention(&cfg),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are logged, not returned.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            tracing::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
