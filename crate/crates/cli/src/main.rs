//! `topcomp`: generate data, partition, precompute compensations, train
//! and report.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "topcomp", version, about = "Mini-batch GNN training with topological compensation")]
struct Cli {
    /// Worker threads for parallel precomputation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand shares.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; every random choice derives a named sub-seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file with defaults for any flag; explicit flags win.
    /// Run manifests are valid config files.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

/// Model shape shared by precompute, train and report.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// `gcn` or `sage`.
    #[arg(long, default_value = "gcn")]
    pub arch: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
}

/// Compensation settings shared by precompute and report.
#[derive(Args, Debug, Clone)]
pub struct CompArgs {
    /// Rank of the fast path (default: feature width).
    #[arg(long)]
    pub k: Option<usize>,
    /// Randomly initialized models concatenated into the basis.
    #[arg(long, default_value_t = 1)]
    pub n_inits: usize,
    /// Hidden width of the basis models (default: `--hidden`).
    #[arg(long)]
    pub basis_width: Option<usize>,
    /// `fast` or `exact`.
    #[arg(long, default_value = "fast")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub power_iterations: usize,
}

/// How partition clusters become training batches.
#[derive(Args, Debug, Clone)]
pub struct BatchArgs {
    #[arg(long, default_value_t = 1)]
    pub clusters_per_batch: usize,
    /// Drop validation and test nodes from every batch.
    #[arg(long)]
    pub remove_eval_nodes: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    #[command(args_override_self = true)]
    Gen(GenArgs),
    /// Partition a dataset's nodes into clusters.
    #[command(args_override_self = true)]
    Partition(PartitionArgs),
    /// Build the compensation cache for a partition.
    #[command(args_override_self = true)]
    Precompute(PrecomputeArgs),
    /// Train with one method; writes metrics and a checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint with layer-wise inference.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Approximation error and accuracy degradation per method and batch count.
    #[command(name = "invariance-report", args_override_self = true)]
    InvarianceReport(ReportArgs),
    /// Validate a dataset directory and print its counts.
    #[command(args_override_self = true)]
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// `double-star`, `duplication` or `sbm`.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 400)]
    pub nodes: usize,
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 8)]
    pub base_n: usize,
    #[arg(long, default_value_t = 4)]
    pub copies: usize,
    #[arg(long, default_value_t = 0.4)]
    pub p_edge: f64,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// `random`, `locality` or `random-walk`.
    #[arg(long, default_value = "locality")]
    pub method: String,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long, default_value_t = 4)]
    pub walk_len: usize,
}

#[derive(Args, Debug)]
pub struct PrecomputeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub comp: CompArgs,
    #[command(flatten)]
    pub batches: BatchArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// `full`, `plain`, `gas` or `top`.
    #[arg(long)]
    pub method: String,
    /// Required for every method except `full`.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Compensation cache from `precompute`; required for `top`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub batches: BatchArgs,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Steps between metric rows; 0 writes one row per epoch.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Epochs between compensation refits from the current model; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub refresh_every: usize,
    #[arg(long)]
    pub gas_warm_start: bool,
    #[arg(long, default_value_t = 1024)]
    pub eval_chunk: usize,
    /// Write 0 for wall-clock seconds so metrics are byte-reproducible.
    #[arg(long)]
    pub deterministic_time: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Trained model to measure; a fresh initialization otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated cluster counts, one report row group each.
    #[arg(long, default_value = "1,2,4,10")]
    pub clusters: String,
    #[arg(long, default_value = "locality")]
    pub partition_method: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub comp: CompArgs,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
}

fn run() -> anyhow::Result<()> {
    let argv = manifest::expand_config(std::env::args_os().collect())?;
    let cli = Cli::parse_from(argv);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Gen(a) => commands::gen(&a, threads),
        Command::Partition(a) => commands::partition(&a, threads),
        Command::Precompute(a) => commands::precompute(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Eval(a) => commands::eval(&a, threads),
        Command::InvarianceReport(a) => commands::invariance_report(&a, threads),
        Command::Check(a) => commands::check(&a, threads),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
