//! The `bevgen` command line: toy datasets, tokenizer and prior training,
//! sampling, evaluation and attention benchmarks.
//!
//! Every command takes `--config <file>` plus optional `--seed` and
//! `--out` overrides and writes its artifacts under the run's work
//! directory. Exit codes: 0 success, 2 configuration error, 3 training
//! divergence, 1 anything else.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error:\n{0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(bevgen_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<bevgen_core::Error> for CliError {
    fn from(e: bevgen_core::Error) -> Self {
        match e {
            bevgen_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl From<bevgen_numcore::Error> for CliError {
    fn from(e: bevgen_numcore::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(bevgen_core::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bevgen",
    version,
    about = "Multi-view generation from BEV layouts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured work directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render toy scenes into a dataset directory.
    GenData(Common),
    /// Train the image and BEV tokenizers.
    TrainVq(Common),
    /// Train the autoregressive prior.
    TrainPrior(Common),
    /// Generate camera views for dataset layouts.
    Sample(Common),
    /// Held-out likelihood, accuracy and layout correspondence.
    Eval(Common),
    /// Dense versus block-sparse attention cost.
    BenchAttn(Common),
}

/// Load the configuration named on the command line and apply overrides.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.work_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Cap rayon's pool at `BEVGEN_THREADS` when set.
fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("BEVGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "BEVGEN_THREADS={value:?} is not a positive integer"
        ))
    })?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_threads().and_then(|()| {
        let (common, f): (&Common, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
            Command::GenData(c) => (c, commands::gen_data),
            Command::TrainVq(c) => (c, commands::train_vqs),
            Command::TrainPrior(c) => (c, commands::train_prior_cmd),
            Command::Sample(c) => (c, commands::sample),
            Command::Eval(c) => (c, commands::eval),
            Command::BenchAttn(c) => (c, commands::bench_attn),
        };
        f(&resolve(common)?)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bevgen: {e}");
            e.exit_code()
        }
    }
}
