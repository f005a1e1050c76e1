//! `infodpcca`: generate paired sequence data, train the two-step model or a
//! baseline, extract latents and evaluate them.
//!
//! Exit codes: 2 configuration, 3 data or IO, 4 numerical failure,
//! 5 stage mismatch, 6 missing ground truth.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "infodpcca", version, about = "Shared and private latent dynamics from paired time series")]
struct Cli {
    /// Worker threads for batch evaluation. Outputs do not depend on it.
    #[arg(long, global = true, env = "INFODPCCA_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Write latent means and stds of a dataset.
    Extract(ExtractArgs),
    /// Score latents or predictions.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum GenCommand {
    /// Noisy linear projections of Hénon orbits.
    Henon(GenHenonArgs),
    /// Two labelled Hénon regimes sharing one pair of projections.
    Grouped(GenGroupedArgs),
}

#[derive(Args)]
struct GenHenonArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `henon` and optional `split` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences.
    #[arg(long)]
    n_seq: Option<usize>,
    /// Sequence length.
    #[arg(long = "t")]
    t_len: Option<usize>,
    #[arg(long)]
    dx: Option<usize>,
    #[arg(long)]
    dy: Option<usize>,
    /// Map coefficient `a`.
    #[arg(long)]
    a: Option<f64>,
    /// Map coefficient `b`.
    #[arg(long)]
    b: Option<f64>,
    /// Observation noise standard deviation.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Also write `train/` and `test/` subsets with this training fraction.
    #[arg(long)]
    split: Option<f64>,
    /// Shuffle seed of the split (defaults to the data seed).
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct GenGroupedArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with the same keys as the flags (snake_case).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Map coefficient `a` of regime 0.
    #[arg(long)]
    a1: Option<f64>,
    /// Map coefficient `a` of regime 1.
    #[arg(long)]
    a2: Option<f64>,
    /// Map coefficient `b` of both regimes.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    n_per_group: Option<usize>,
    #[arg(long = "t")]
    t_len: Option<usize>,
    #[arg(long)]
    dx: Option<usize>,
    #[arg(long)]
    dy: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dvib, dpcca or infodpcca.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Step-1 checkpoint to continue from with `--stage 2`.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// With `--stage 2`: start from random, frozen Step-I components.
    #[arg(long)]
    init_random: bool,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    residual_connection: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    reuse_rnn: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    reuse_sigma1: Option<bool>,
    #[arg(long)]
    dz0: Option<usize>,
    #[arg(long)]
    dz1: Option<usize>,
    #[arg(long)]
    dz2: Option<usize>,
    #[arg(long)]
    rnn_hidden: Option<usize>,
    /// Comma-separated emitter hidden widths.
    #[arg(long, value_delimiter = ',')]
    mlp_hidden: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// β of the bottleneck baseline.
    #[arg(long)]
    dvib_beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch cap per stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// step1 (shared-latent prior) or step2 (posterior).
    #[arg(long)]
    stage: String,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Pooled correlation of extracted z⁰ with the true latents.
    Corr(EvalCorrArgs),
    /// k-means on pooled latent or PCA features, scored by NMI and silhouette.
    Cluster(EvalClusterArgs),
    /// One-step-ahead predictions of one sequence as CSV.
    Recon(EvalReconArgs),
}

#[derive(Args)]
struct EvalCorrArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report directory (`corr.json`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "features", required = true, args = ["latents", "pca"])]
struct EvalClusterArgs {
    /// Labelled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Latents directory to pool.
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Pool the raw observations projected on this many principal axes instead.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Report directory (`cluster.json`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalReconArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seq: usize,
    /// Comma-separated indices into the concatenated observation `[x¹, x²]`.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// step1 or step2; defaults to the checkpoint's stage.
    #[arg(long)]
    stage: Option<String>,
    /// Report directory (`recon.csv`, `recon.json`).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::run(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
