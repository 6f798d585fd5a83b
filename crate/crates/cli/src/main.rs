//! `cvr`: index, retrieve, rerank and evaluate composed-image retrieval runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cvr", version, about = "Two-stage composed-image retrieval harness")]
struct Cli {
    /// Worker threads for scoring and per-query parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a gallery index from embedding records.
    Index(IndexArgs),
    /// Stage-I cosine retrieval; writes a run file.
    Retrieve(RetrieveArgs),
    /// Stage-II assessor reranking; writes a run file.
    Rerank(RerankArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Generate a seeded synthetic benchmark.
    Synth(SynthArgs),
    /// Fit text-to-image modality alignment statistics.
    RealignFit(RealignArgs),
    /// Train a query projector with cluster-pure InfoNCE batches.
    TrainProjector(TrainArgs),
    /// Run index → retrieve → rerank → eval from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

#[derive(Args)]
struct IndexArgs {
    /// Embedding records, one `{"id", "vec"}` object per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: Format,
    /// L2-normalize rows (the default).
    #[arg(long, conflicts_with = "no_normalize")]
    normalize: bool,
    /// Store rows as given.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Ranking depth per query.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// `mock:ORACLE[,tpr=X][,fpr=Y][,seed=N]` or `http://HOST:PORT`;
    /// defaults to the URL in CVR_ASSESSOR_URL.
    #[arg(long)]
    assessor: Option<String>,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Entries written per run line; 0 writes the whole gallery.
    #[arg(long, default_value_t = 100)]
    run_depth: usize,
    /// Seed for a mock assessor without an explicit seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-query trace file (scored window, refined query, flags).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Default)]
struct BudgetArgs {
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Concurrent assessor calls within one window.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "r@1,r@5,r@10,r@50")]
    metrics: String,
    /// Also write `{"metric", "value"}` lines here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    gallery_size: usize,
    #[arg(long)]
    queries: usize,
    #[arg(long)]
    dim: usize,
    /// Per-coordinate query noise.
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    seed: u64,
    /// Candidates per qrels subset, target included; 0 omits subsets.
    #[arg(long, default_value_t = cvr_core::synth::DEFAULT_SUBSET_SIZE)]
    subset_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write a binary index of the gallery as `gallery.cvre`.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct RealignArgs {
    /// Text-side embedding records.
    #[arg(long)]
    text: PathBuf,
    /// Image-side embedding records.
    #[arg(long)]
    image: PathBuf,
    /// Stats file.
    #[arg(long)]
    out: PathBuf,
    /// Records to transform with the fitted stats.
    #[arg(long, requires = "apply_out")]
    apply: Option<PathBuf>,
    #[arg(long, requires = "apply")]
    apply_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    Gelu,
}

#[derive(Args)]
struct TrainArgs {
    /// Pooled query features, paired with targets by id.
    #[arg(long)]
    pooled: PathBuf,
    /// Frozen target embeddings.
    #[arg(long)]
    targets: PathBuf,
    /// Projector checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    clusters: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = cvr_core::contrastive::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = cvr_core::contrastive::DEFAULT_TAU)]
    tau: f64,
    /// Hidden width; omit for a single linear layer.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_enum, default_value = "gelu")]
    activation: ActivationArg,
    #[arg(long)]
    cosine_anneal: bool,
    #[arg(long)]
    drop_last: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Export `{"id", "cluster"}` lines for the target clustering.
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Write per-step losses as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    assessor: Option<String>,
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_depth: Option<usize>,
    /// Also write trace.jsonl.
    #[arg(long)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = matches!(e.downcast_ref::<cvr_core::Error>(), Some(cvr_core::Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
