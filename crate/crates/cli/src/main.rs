//! `trus-seg` command-line interface.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "trus-seg", version, about = "2.5D prostate TRUS segmentation with continual distillation")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize, resample, resize and equalize a dataset directory.
    Preprocess(PreprocessArgs),
    /// Generate synthetic phantom volumes for a named domain.
    Phantom(PhantomArgs),
    /// Train a source (or from-scratch) model.
    Train(TrainArgs),
    /// Finetune a checkpoint on target-domain data.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cross-evaluate checkpoints on domains (forgetting matrix).
    Report(ReportArgs),
    /// Run an ablation sweep.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    clahe_tiles: Option<usize>,
    #[arg(long)]
    clahe_clip: Option<f64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    no_clahe: bool,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    domain: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Volume size as depth,height,width (semi-axes scale along).
    #[arg(long, value_delimiter = ',', num_args = 1)]
    dims: Option<Vec<usize>>,
    /// Shorthand for 16,64,80.
    #[arg(long, conflicts_with = "dims")]
    desk: bool,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Exact output directory instead of `<output.dir>/<stage>/<timestamp>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceStage {
    Ms,
    Scratch,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory (overrides `data.train`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ms")]
    stage: SourceStage,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FinetuneMode {
    Kd,
    Classic,
    Full,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    parent: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kd")]
    mode: FinetuneMode,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; defaults to a new run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-case surface distance point lists here.
    #[arg(long)]
    surface_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    domains: Vec<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    kind: String,
    /// Comma-separated grid; defaults to the standard grid for the kind.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    parent: Option<PathBuf>,
    #[arg(long)]
    source_train: Option<PathBuf>,
    #[arg(long)]
    source_test: Option<PathBuf>,
    #[arg(long)]
    target_train: Option<PathBuf>,
    #[arg(long)]
    target_test: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .downcast_ref::<trus_seg::Error>()
                .is_some_and(|e| matches!(e, trus_seg::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
