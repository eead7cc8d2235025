//! `laser`: train, probe and verify small language models with standard,
//! LASER and differential attention.

mod commands;
mod config;
mod error;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use laser_core::gradcheck::Scope;
use laser_core::tensor::Fault;
use laser_core::DType;

use commands::{fit, gradcheck, init, overflow, probe, train};
use error::CliResult;

#[derive(Parser)]
#[command(name = "laser", version, about = "Attention experiments: training, saturation probes and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Attention,
    Model,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Ops => Scope::Ops,
            ScopeArg::Attention => Scope::Attention,
            ScopeArg::Model => Scope::Model,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SoftmaxBackwardSign,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint, saturation and gradient-check reports.
    Train {
        /// JSON config file; every field has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config value, e.g. `--set train.seed=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set attention.variant=<VARIANT>`.
        #[arg(long)]
        attention: Option<String>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Suites to run (default: all). Repeatable.
        #[arg(long = "scope", value_enum)]
        scopes: Vec<ScopeArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Deliberately break a backward rule to confirm the checks catch it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Attention-probability histogram and saturation statistics of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file; windows are drawn from its held-out tail.
        #[arg(long)]
        data: PathBuf,
        /// Extra threshold on top of 1e-7 and 1e-3. Repeatable.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        /// Tokens per sequence (default: the model's maximum).
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0.02)]
        holdout: f64,
        /// Count causally masked entries (exact zeros) too.
        #[arg(long)]
        include_masked: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate LASER attention with and without the max shift at large value scales.
    OverflowDemo {
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DTypeArg,
        #[arg(long, default_value_t = 100.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        head_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit loss = a * params^b to `params,loss` CSV rows.
    FitScaling {
        points: PathBuf,
        /// Also write a log-log plot of the points and the fit.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        attention: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train { config, set, attention, out } => {
            let report = train::run(&train::TrainArgs { config, set, attention, out })?;
            println!("{}", serde_json::to_string_pretty(&report["summary"]).expect("json"));
        }
        Command::Gradcheck { scopes, seed, out, inject_fault } => {
            gradcheck::run(&gradcheck::GradcheckArgs {
                scopes: scopes.into_iter().map(Scope::from).collect(),
                seed,
                fault: inject_fault.map(|FaultArg::SoftmaxBackwardSign| Fault::SoftmaxBackwardSign),
                out,
            })?;
        }
        Command::Probe { checkpoint, data, thresholds, sequences, seq_len, holdout, include_masked, out } => {
            probe::run(&probe::ProbeArgs {
                checkpoint,
                data,
                thresholds,
                sequences,
                seq_len,
                holdout_frac: holdout,
                include_masked,
                out,
            })?;
        }
        Command::OverflowDemo { dtype, scale, seed, seq_len, head_size, out } => {
            let dtype = match dtype {
                DTypeArg::F32 => DType::F32,
                DTypeArg::F64 => DType::F64,
            };
            overflow::run(&overflow::OverflowArgs { dtype, scale, seed, seq_len, head_size, out })?;
        }
        Command::FitScaling { points, svg, out } => {
            fit::run(&fit::FitArgs { points, svg, out })?;
        }
        Command::Init { config, set, attention, out } => {
            let summary = init::run(&init::InitArgs { config, set, attention, out })?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", report::to_pretty_json(&e.to_json()));
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
