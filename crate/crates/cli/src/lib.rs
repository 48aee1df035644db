//! `attrnet` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod glyphs;
pub mod plot;

pub use commands::{emit_plots, series_labels};

#[derive(Debug, Parser)]
#[command(name = "attrnet", version, about, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus: manifest.jsonl plus images/.
    Synth(SynthArgs),
    /// Train one model and log per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a split; writes detections and metrics.
    Eval(EvalArgs),
    /// Train every configuration of the component study over several seeds.
    Ablate(AblateArgs),
    /// Render loss, validation and PR curves from training logs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = attrnet_core::data::DEFAULT_N_ATTRIBUTES)]
    pub n_attributes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest; image paths resolve against its directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
    /// `key=value` settings applied after the config file.
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset manifest. Without it a synthetic corpus is written to
    /// `<out>/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub synth_n: usize,
    #[arg(long, default_value_t = 64)]
    pub synth_size: usize,
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub overwrite: bool,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Training logs (`metrics.csv`). A `pr_curve.csv` beside a log also
    /// gets a PR-curve image.
    pub logs: Vec<PathBuf>,
    /// Extra PR-curve files written by `eval`.
    #[arg(long)]
    pub pr: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

/// Parse `args` (program name first), run the verb and return the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
