mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cirbench_core::ErrorClass;

/// Composed image retrieval benchmark toolkit.
#[derive(Debug, Parser)]
#[command(name = "cirbench", version, about)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine visually similar image subsets from a feature file.
    Mine(MineArgs),
    /// Draw the directed reference→target pairs of mined subsets.
    Pairs(PairsArgs),
    /// Assign subsets to train/val/test, keeping overlapping subsets together.
    Split(SplitArgs),
    /// Per-split subset, pair and image counts of annotation files.
    Stats(StatsArgs),
    /// Caption length statistics in whitespace tokens.
    AnalyzeCaptions(CaptionArgs),
    /// Train a composer with the soft triplet loss.
    Train(TrainArgs),
    /// Compare analytic gradients against central differences.
    GradCheck(GradCheckArgs),
    /// Write composed query and projected image embeddings as JSON lines.
    Embed(ModelArgs),
    /// Rank both pools for every query and write a submission file.
    Retrieve(RetrieveArgs),
    /// Score a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Score a submission on an evaluation server or against a local gold file.
    Submit(SubmitArgs),
    /// Run the hidden-label evaluation service.
    Serve(ServeArgs),
    /// Generate the synthetic attribute benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Feature file in CFV1 format.
    #[arg(long)]
    features: PathBuf,
    /// Id sidecar; defaults to the feature path with `.ids` appended.
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Annotation file.
    #[arg(long)]
    dataset: PathBuf,
    /// Split of the annotation file; inferred from its name when omitted.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    features: FeatureArgs,
    /// Number of subsets to mine.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.94)]
    near_duplicate_threshold: f64,
    #[arg(long, default_value_t = 0.002)]
    min_gap: f64,
    #[arg(long, default_value_t = 20)]
    window: usize,
    #[arg(long, default_value_t = 6)]
    size: usize,
    /// Largest number of images an accepted subset may share with earlier ones.
    #[arg(long, default_value_t = 2)]
    overlap_limit: usize,
    #[arg(long, env = "CIRBENCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Subsets written by `mine`.
    #[arg(long)]
    subsets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    subsets: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
    #[arg(long, env = "CIRBENCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Annotation files; the split of each is inferred from its name.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Also report multi-turn dialogue paths.
    #[arg(long)]
    dialogue: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NegativeArg {
    Corpus,
    InBatch,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    /// Use a frozen identity image projection (requires d_model == feature dim).
    #[arg(long)]
    identity_projection: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    features: FeatureArgs,
    /// Labeled training annotations.
    #[arg(long)]
    train: PathBuf,
    /// Labeled validation annotations, scored after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Composer kind: image_only, text_only, random_image_text, concat_mlp,
    /// gated_residual or transformer.
    #[arg(long)]
    kind: String,
    #[command(flatten)]
    arch: ArchArgs,
    /// Starting point for the optimization settings below.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    negatives: Option<NegativeArg>,
    #[arg(long)]
    negatives_per_positive: Option<usize>,
    #[arg(long, env = "CIRBENCH_SEED", default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Kinds to check; all trainable kinds when omitted.
    #[arg(long)]
    kind: Vec<String>,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Caption length of each random query.
    #[arg(long, default_value_t = 5)]
    tokens: usize,
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, env = "CIRBENCH_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Seed of the substitute references of the random-image baseline.
    #[arg(long, default_value_t = 0)]
    substitute_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Length of each global ranking.
    #[arg(long, default_value_t = cirbench_core::eval::DEFAULT_DEPTH)]
    depth: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    /// Submission written by `retrieve`.
    #[arg(long)]
    submission: PathBuf,
    /// Base URL of an evaluation server, e.g. http://127.0.0.1:8080.
    #[arg(long, conflicts_with = "gold", required_unless_present = "gold")]
    server: Option<String>,
    /// Score against a local labeled file instead of a server.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Labeled gold annotations.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Largest accepted request body in bytes.
    #[arg(long, default_value_t = cirbench_server::DEFAULT_BODY_LIMIT)]
    body_limit: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, env = "CIRBENCH_SEED", default_value_t = 7)]
    seed: u64,
}

/// A numerical check that ran to completion but failed.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cirbench_core::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            };
        }
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
