//! The `lmk3d` command-line driver.
//!
//! Every command resolves a [`config::RunConfig`], writes it to
//! `<out>/resolved_config.toml`, then writes its artifacts next to it.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lmk3d_core::network::Variant;

/// Exit status classes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lmk3d_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 verification.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(lmk3d_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lmk3d", version, about = "3D landmark detection with routed attention")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "lmk3d-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: lmk3d_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth,
    /// Train on a dataset; writes model.ckpt and loss_curve.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare predicted and annotated landmark files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Predict landmarks for every volume in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient audit.
    Gradcheck {
        /// ops, vbra, losses, end2end or all.
        #[arg(default_value = "all")]
        suite: String,
        /// Perturb the analytic gradients; the audit must then fail.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Routed versus dense attention cost sweep.
    Bench,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let cfg = config::resolve(g.config.as_deref(), &g.sets, g.seed, g.variant)?;
    let explicit_model = g.config.is_some() || g.variant.is_some() || g.sets.iter().any(|s| s.trim().starts_with("model."));
    commands::prepare_out(&g.out, &cfg)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &g.out),
        Command::Train { data } => commands::train(&cfg, data, &g.out),
        Command::Eval { pred, gt } => commands::eval(&cfg, pred, gt, &g.out),
        Command::Infer { checkpoint, data } => commands::infer(&cfg, explicit_model, checkpoint, data, &g.out),
        Command::Gradcheck { suite, corrupt_gradient } => commands::gradcheck(suite, *corrupt_gradient, &g.out),
        Command::Bench => commands::bench(&cfg, &g.out),
    }
}
