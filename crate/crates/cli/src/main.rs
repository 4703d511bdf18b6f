//! `commcost` command-line tool.
//!
//! Message sizes on the command line and in every CSV are bytes; `beta` is
//! seconds per byte. Internally the library works in bits.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "commcost", version, about = "Communication cost modelling for compressed distributed optimization")]
pub struct Cli {
    /// Seed for every random choice; overrides `seed` in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Flat `key = value` simulation config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run distributed gradient descent under the time model.
    Simulate(SimulateArgs),
    /// Classify message sizes and tabulate compression speedups.
    Regions(RegionsArgs),
    /// Fit alpha and beta from measured samples.
    Fit(FitArgs),
    /// Pick the compression power minimizing predicted cost.
    Select(SelectArgs),
    /// Generate synthetic timing samples.
    Synth(SynthArgs),
    /// Measure round-trip times against a running server.
    Probe(ProbeArgs),
    /// Run the ping-pong server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Latency, seconds.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seconds per byte.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha_m: Option<f64>,
    #[arg(long)]
    pub beta_m: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Any config key, e.g. `--set compressor.kind=rand_k`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RegionsArgs {
    #[arg(long)]
    pub alpha: f64,
    /// Seconds per byte.
    #[arg(long)]
    pub beta: f64,
    /// Message sizes in bytes.
    #[arg(long, value_delimiter = ',', conflicts_with = "size_range", required_unless_present = "size_range")]
    pub sizes: Vec<f64>,
    /// `LO:HI:N`, N sizes spaced geometrically in bytes.
    #[arg(long)]
    pub size_range: Option<String>,
    /// Ratio separating the three regions.
    #[arg(long, default_value_t = commcost::commodel::DEFAULT_RHO)]
    pub rho: f64,
    /// Compression ratios; defaults to 25 points from 1 to 10^6.
    #[arg(long, value_delimiter = ',')]
    pub omegas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with `size_bytes,time_seconds` columns.
    #[arg(long, conflicts_with = "live", required_unless_present = "live")]
    pub samples: Option<PathBuf>,
    /// Measure against a server at HOST:PORT instead.
    #[arg(long)]
    pub live: Option<String>,
    #[arg(long, default_value = "grid")]
    pub policy: String,
    /// Largest message, bytes. Defaults to the largest sample, or 1 MiB live.
    #[arg(long)]
    pub p_max: Option<u64>,
    /// Live exchanges.
    #[arg(long, default_value_t = 64)]
    pub steps: u64,
    /// Forgetting factor in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long, requires = "beta", conflicts_with = "fit")]
    pub alpha: Option<f64>,
    /// Seconds per byte.
    #[arg(long, requires = "alpha")]
    pub beta: Option<f64>,
    /// Fit trace from `fit`; every row is replayed, the last one decides.
    #[arg(long, required_unless_present = "alpha")]
    pub fit: Option<PathBuf>,
    #[arg(long, default_value = "rand_k")]
    pub family: String,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub b: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub alpha: f64,
    /// Seconds per byte.
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha_m: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta_m: f64,
    /// Message sizes in bytes, each repeated `--reps` times.
    #[arg(long, value_delimiter = ',', conflicts_with = "count", required_unless_present = "count")]
    pub sizes: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub reps: u32,
    /// Number of samples with sizes uniform on [1, p_max].
    #[arg(long, requires = "p_max")]
    pub count: Option<u64>,
    #[arg(long)]
    pub p_max: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Server HOST:PORT.
    #[arg(long)]
    pub addr: String,
    /// Frame sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "1000,1000000")]
    pub sizes: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    pub reps: u32,
    #[arg(long, default_value_t = 2)]
    pub warmup: u32,
    /// Connect timeout, seconds.
    #[arg(long, default_value_t = 5.0)]
    pub timeout: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub bind: String,
    /// Largest accepted frame, bytes.
    #[arg(long, default_value_t = 64 << 20)]
    pub p_max: u64,
    /// Exit after this many connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&cli, a),
        Command::Regions(a) => commands::regions(&cli, a),
        Command::Fit(a) => commands::fit(&cli, a),
        Command::Select(a) => commands::select(&cli, a),
        Command::Synth(a) => commands::synth(&cli, a),
        Command::Probe(a) => commands::probe(&cli, a),
        Command::Serve(a) => commands::serve(&cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
