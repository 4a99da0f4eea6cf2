//! `rcvar`: ingest, regime fitting, generator training, walk-forward
//! backtest, diagnostics and reporting from one TOML config.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or input error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use regime_cvar::Error;

mod commands;
mod summary;

pub use commands::{
    cmd_backtest, cmd_diagnose, cmd_fit_hmm, cmd_ingest, cmd_report, cmd_synth, cmd_train_gen, BicRow, DiagnosticsBundle,
    HmmReport,
};

#[derive(Parser, Debug)]
#[command(name = "rcvar", version, about = "Regime-conditioned scenario CVaR allocation")]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a regime-switching synthetic price panel.
    Synth(SynthArgs),
    /// Clean a price CSV and convert it to simple returns.
    Ingest(IngestArgs),
    /// Rolling HMM refits and a BIC table over the configured state counts.
    FitHmm(FitHmmArgs),
    /// Train the scenario generator on the train split.
    TrainGen(TrainGenArgs),
    /// Walk-forward backtest over the test split.
    Backtest(BacktestArgs),
    /// Scenario calibration diagnostics and Sharpe uplift intervals.
    Diagnose(DiagnoseArgs),
    /// Merge backtest and diagnostics into Markdown and JSON summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub assets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the simulated regime path as CSV.
    #[arg(long)]
    pub regimes: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Price CSV; defaults to `data.prices` in the config.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    /// Returns CSV; defaults to `data.returns` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Returns CSV; defaults to `data.returns` in the config.
    #[arg(long)]
    pub returns: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitHmmArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "hmm_report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainGenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "generator.bin")]
    pub out: PathBuf,
    /// Override the tail weight η (0 trains the unweighted loss).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Stop after this many steps and write a checkpoint instead.
    #[arg(long, requires = "checkpoint")]
    pub stop_at: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by --stop-at.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained generator; required when an RC-CVaR strategy is configured.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, default_value = "backtest")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "backtest")]
    pub backtest_dir: PathBuf,
    /// Adds filtered regime posteriors to the plot table.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub returns: Option<PathBuf>,
    #[arg(long, default_value = "diagnostics")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, default_value = "backtest")]
    pub backtest_dir: PathBuf,
    #[arg(long, default_value = "diagnostics")]
    pub diagnostics_dir: PathBuf,
    /// Output stem; writes `<out>.md` and `<out>.json`.
    #[arg(long, default_value = "summary")]
    pub out: PathBuf,
}

/// Resolves paths against the run directory.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub run_dir: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        1
    }
}

/// Parse arguments, run the command and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let ctx = Ctx { run_dir: cli.run_dir };
    let out = match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::FitHmm(a) => cmd_fit_hmm(&ctx, a),
        Command::TrainGen(a) => cmd_train_gen(&ctx, a),
        Command::Backtest(a) => cmd_backtest(&ctx, a),
        Command::Diagnose(a) => cmd_diagnose(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    };
    match out {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
