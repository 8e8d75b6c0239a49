//! `fedldp` command-line tool.
//!
//! Exit status: 0 on success, 1 for invalid input or a failed check, 2 for
//! internal (I/O) failures.

mod commands;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedldp::accountants::{Method, DEFAULT_DELTA_TILDE};

#[derive(Debug)]
pub enum CliError {
    /// Bad input or a domain error; `record` is an optional machine-readable
    /// body printed to stdout.
    Domain {
        message: String,
        record: Option<serde_json::Value>,
    },
    Internal(String),
}

impl CliError {
    pub fn domain(message: impl Into<String>) -> Self {
        CliError::Domain {
            message: message.into(),
            record: None,
        }
    }
}

impl From<fedldp::Error> for CliError {
    fn from(e: fedldp::Error) -> Self {
        CliError::Domain {
            message: e.to_string(),
            record: Some(serde_json::json!({ "error": e.kind(), "message": e.to_string() })),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fedldp", version, about = "Noise calibration and utility trade-offs for LDP federated SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate the per-user noise variance for one privacy budget.
    Calibrate(CalibrateArgs),
    /// Sweep ε and T for every accountant and write the trade-off table.
    Sweep(SweepArgs),
    /// Run the FedSGD simulator from a JSON config.
    Simulate(SimulateArgs),
    /// Run the built-in end-to-end checks and print a pass/fail table.
    Validate(ValidateArgs),
    /// Re-plot an existing sweep CSV.
    Plot(PlotArgs),
}

/// Loss regularity and user count, shared by calibrate and sweep.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 10_000)]
    pub dim: u64,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long = "grad-bound", default_value_t = 5.0)]
    pub grad_bound: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub q: f64,
    #[arg(long, default_value_t = 70_000)]
    pub rounds: u64,
    #[arg(long, default_value = "proposed")]
    pub method: Method,
    #[arg(long = "delta-tilde", default_value_t = DEFAULT_DELTA_TILDE)]
    pub delta_tilde: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write `calibration.json` and a manifest into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "proposed,ma,ac1,ac2")]
    pub method: Vec<Method>,
    /// Explicit comma-separated ε values; replaces the start/stop/step grid.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Vec<f64>,
    #[arg(long = "eps-start", default_value_t = 0.1)]
    pub eps_start: f64,
    #[arg(long = "eps-stop", default_value_t = 1.0)]
    pub eps_stop: f64,
    #[arg(long = "eps-step", default_value_t = 0.05)]
    pub eps_step: f64,
    #[arg(long, value_delimiter = ',', default_value = "70000,700000")]
    pub rounds: Vec<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub q: f64,
    #[arg(long = "delta-tilde", default_value_t = DEFAULT_DELTA_TILDE)]
    pub delta_tilde: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "sweep-out")]
    pub out: PathBuf,
    /// Write noise, utility and rate SVG panels.
    #[arg(long)]
    pub plot: bool,
    #[arg(long = "log-y")]
    pub log_y: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long = "per-user-data")]
    pub per_user_data: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long = "grad-bound")]
    pub grad_bound: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long, default_value = "sim-out")]
    pub out: PathBuf,
    /// Also write an SVG of the mean loss gap.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Write the report as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Sweep CSV to plot.
    #[arg(long)]
    pub input: PathBuf,
    /// Sweep report JSON supplying the cap lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long = "log-y")]
    pub log_y: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Validate(a) => commands::validate(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain { message, record }) => {
            if let Some(r) = record {
                println!("{r}");
            }
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(message)) => {
            eprintln!("internal error: {message}");
            ExitCode::from(2)
        }
    }
}
