//! Command-line front end: `synth`, `track`, `train`, `eval` and `gradcheck`
//! driven by one TOML run configuration.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use toml::Value;

pub use commands::Status;
use config::{parse_override, RunConfig};

const OVERRIDE_HELP: &str = "Any config field can be overridden with --section.key=value, \
for example --train.iterations=500 or --window.mode=batch. Overrides apply after the config file, in order.";

#[derive(Debug, Parser)]
#[command(name = "flowtrack", version, about = "Network-flow multi-object tracking with learned costs", after_help = OVERRIDE_HELP)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write synthetic detection and ground-truth files.
    Synth,
    /// Track every detection file and write results plus a timing log.
    Track {
        /// Overrides `cost.model`.
        #[arg(long)]
        cost: Option<String>,
    },
    /// Fit a learned cost model; writes model.bin and loss.csv.
    Train,
    /// Score result files against ground truth; writes metrics.csv.
    Eval,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
}

/// Splits dotted `--section.key=value` arguments from the ones clap parses.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, Value)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let dotted = arg.to_str().and_then(|s| {
            let key = s.strip_prefix("--")?.split('=').next()?;
            key.contains('.').then_some(s)
        });
        match dotted {
            Some(s) => overrides.push(parse_override(s)?),
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

/// Parses `args` (program name first), loads the configuration and runs the
/// command.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString>>) -> Result<Status> {
    let (rest, mut overrides) = split_overrides(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(rest)?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), Value::Integer(seed as i64)));
    }
    if let Command::Track { cost: Some(cost) } = &cli.command {
        overrides.push(("cost.model".into(), Value::String(cost.clone())));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building the worker pool")?;
    pool.install(|| match cli.command {
        Command::Synth => commands::synth(&config),
        Command::Track { .. } => commands::track(&config),
        Command::Train => commands::train_model(&config),
        Command::Eval => commands::eval(&config),
        Command::Gradcheck => commands::gradcheck(&config),
    })
}
