//! `otts`: generate corpora, train the task encoder, compute distances,
//! select source tasks and run the validation probes.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags. Failures print one JSON line
//! `{"error":"<kind>","message":"..."}` to stderr and exit nonzero.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "otts", version, about = "Optimal-transport task selection for few-shot learning")]
pub struct Cli {
    /// TOML file with settings; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "OTTS_THREADS", value_name = "N")]
    threads: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain task corpus.
    Gen(GenArgs),
    /// Train the task encoder self-supervised on a corpus.
    Train(TrainArgs),
    /// Pairwise distance matrix between two task lists.
    Dist(DistArgs),
    /// Average/max/min and histograms of a distance matrix.
    Stats(StatsArgs),
    /// Rank source tasks by distance to target tasks and keep the top M.
    Select(SelectArgs),
    /// Correlate graph distance with the likelihood gap of a softmax probe.
    Probe(ProbeArgs),
    /// Train a probe on selected versus random source tasks.
    CompareCurriculum(CurriculumArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct SolverArgs {
    /// Entropic regularization relative to the largest cost.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Sinkhorn iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Sinkhorn marginal tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Outer steps of the Gromov-Wasserstein solver.
    #[arg(long)]
    gw_outer_iter: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct EncoderArgs {
    /// Encoder checkpoint to embed tasks with.
    #[arg(long, value_name = "FILE", conflicts_with = "identity")]
    checkpoint: Option<PathBuf>,
    /// Use raw features instead of a trained encoder.
    #[arg(long)]
    identity: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CorpusFormat {
    /// Directory with tasks.jsonl and manifest.json.
    Jsonl,
    /// Single binary file.
    Binary,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (jsonl) or file (binary).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    format: CorpusFormat,
    /// Number of domains.
    #[arg(long)]
    domains: Option<usize>,
    /// Number of tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Classes per task.
    #[arg(long)]
    n_way: Option<usize>,
    /// Labeled shots per class.
    #[arg(long)]
    k_shot: Option<usize>,
    /// Held-out queries per class.
    #[arg(long)]
    queries: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory or file.
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Output directory for encoder.ckpt, state.ckpt and train_log.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from DIR/state.ckpt if it exists.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the Wasserstein term in the loss.
    #[arg(long)]
    r: Option<f64>,
    /// Target decay rate.
    #[arg(long)]
    tau: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    output_dim: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct DistArgs {
    /// Tasks for the rows.
    #[arg(long, value_name = "PATH")]
    rows: PathBuf,
    /// Tasks for the columns (default: the rows).
    #[arg(long, value_name = "PATH")]
    cols: Option<PathBuf>,
    /// Use only the first N tasks of each list.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Output matrix; `.csv` writes CSV, anything else binary.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Weight of the Wasserstein term.
    #[arg(long)]
    r: Option<f64>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Distance matrix (binary or CSV).
    #[arg(long, value_name = "FILE")]
    matrix: PathBuf,
    /// Corpus of the rows, to group them by domain.
    #[arg(long, value_name = "PATH")]
    rows_corpus: Option<PathBuf>,
    /// Corpus of the columns (default: the rows corpus).
    #[arg(long, value_name = "PATH")]
    cols_corpus: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Leave out entries whose row and column task ids coincide.
    #[arg(long)]
    skip_self: bool,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Target tasks; several are ranked by their mean distance.
    #[arg(long, value_name = "PATH")]
    target: PathBuf,
    /// Use only the target task with this id.
    #[arg(long, value_name = "ID")]
    target_id: Option<u64>,
    /// Candidate source tasks.
    #[arg(long, value_name = "PATH")]
    sources: PathBuf,
    /// Number of tasks to keep.
    #[arg(long)]
    m: Option<usize>,
    /// Weight of the Wasserstein term.
    #[arg(long)]
    r: Option<f64>,
    /// Build target graphs from support or query samples.
    #[arg(long, value_name = "SOURCE")]
    graph_source: Option<String>,
    /// Also write the JSON result here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Corpus whose manifest defines the domains.
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Domain index the probe tasks come from.
    #[arg(long)]
    domain: Option<usize>,
    /// Number of task pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Largest perturbation standard deviation.
    #[arg(long)]
    max_noise: Option<f64>,
    /// Shots per class of the classifier's reference task.
    #[arg(long)]
    reference_shots: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Histogram bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV of pair_id,distance,gap.
    #[arg(long, value_name = "FILE")]
    out_csv: Option<PathBuf>,
    /// JSON histogram of distances.
    #[arg(long, value_name = "FILE")]
    out_hist: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct CurriculumArgs {
    /// Corpus of source tasks, with a manifest to draw targets from.
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Number of repetitions with fresh targets.
    #[arg(long)]
    trials: Option<usize>,
    /// Source window per trial (0: whole corpus).
    #[arg(long)]
    pool: Option<usize>,
    /// Target tasks per trial.
    #[arg(long)]
    targets: Option<usize>,
    /// Held-out queries per class of each target.
    #[arg(long)]
    queries: Option<usize>,
    /// Source tasks per arm.
    #[arg(long)]
    m: Option<usize>,
    /// Probe training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Probe learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the Wasserstein term in selection.
    #[arg(long)]
    r: Option<f64>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

/// Classify an error for the one-line report.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<otts::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid-input"
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return match commands::write_stdout(&e.to_string()) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(err) => {
                        report("io", &format!("{err:#}"));
                        ExitCode::FAILURE
                    }
                };
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

/// Load the config file, if any, and apply the global flags.
fn base_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    use anyhow::Context;
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}
