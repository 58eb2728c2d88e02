//! `percgan`: dataset generation, training, sampling, evaluation and
//! gradient verification for text-conditioned GANs with perceptual losses.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use percgan_core::PerceptualVariant;

#[derive(Debug, Parser)]
#[command(name = "percgan", version, about = "Text-to-image GANs with contextual and perceptual losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a procedural attribute-conditioned dataset.
    GenData(GenDataArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Write a grid of samples conditioned on test-category queries.
    Sample(SampleArgs),
    /// Train the evaluation classifier on real images.
    TrainClassifier(TrainClassifierArgs),
    /// Classify generated images of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every loss variant under one budget.
    Compare(CompareArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    per_category: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `$PERCGAN_OUT_ROOT/runs/<variant>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// none | pixel | vgg | gram
    #[arg(long)]
    variant: Option<PerceptualVariant>,
    /// Perceptual weight λ (default 1e-6).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Base seed from which parameter, data and noise seeds are derived.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    feature_layer: Option<usize>,
    /// Tensor archive with feature-net weights.
    #[arg(long)]
    feature_weights: Option<PathBuf>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Query source; only `test` (unseen categories) is supported.
    #[arg(long, default_value = "test")]
    queries: String,
    /// ROWSxCOLS
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained classifier directory; trained from the dataset when absent.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    n_per_query: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (JSON); a CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Number of seeds per variant (seeds 0..N).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_per_query: Option<usize>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// CSV table path; JSON is written next to it. Runs go to `<dir>/runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Restrict to one op (e.g. `conv2d`) or one named check.
    #[arg(long)]
    op: Option<String>,
    /// Add a check with a deliberately wrong backward rule.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value_t = percgan_core::verify::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = percgan_core::verify::DEFAULT_TOL)]
    tol: f64,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
    if r == 0 || c == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((r, c))
}

/// Errors caused by how the command was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Failures that are not the caller's fault: numerical breakdown or a
/// failed verification.
#[derive(Debug)]
pub struct InternalError(pub String);

impl std::fmt::Display for InternalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InternalError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InternalError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<percgan_core::Error>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
