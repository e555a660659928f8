//! Subcommand implementations. Every command first folds its flags into the
//! [`RunConfig`], so `--print-config` shows exactly what would run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use otts::analysis::{curriculum_trials, domain_probe, grouped_stats};
use otts::encoder::{read_checkpoint, write_checkpoint, EncoderParams};
use otts::graph::Task;
use otts::selector::{
    pairwise_matrix, read_distance_matrix, select_for_target, select_for_targets, write_distance_matrix,
    GraphSource,
};
use otts::synth::{generate_corpus, read_corpus, write_corpus, write_corpus_binary, Corpus};
use otts::train::{read_train_state, train_with, write_train_state, TrainLog};

use crate::config::RunConfig;
use crate::{
    base_config, Cli, Command, CorpusFormat, CurriculumArgs, DistArgs, EncoderArgs, GenArgs, ProbeArgs,
    SelectArgs, SolverArgs, StatsArgs, TrainArgs,
};

/// Files written by `train` into its output directory.
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Overwrite `$slot` when the flag was given.
macro_rules! set {
    ($slot:expr, $flag:expr) => {
        if let Some(v) = $flag {
            $slot = v;
        }
    };
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    apply_flags(&mut cfg, &cli.command)?;
    if cli.print_config {
        return write_stdout(&toml::to_string(&cfg).context("serializing configuration")?);
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            bail!(otts::Error::InvalidInput("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting the worker pool")?;
    }
    match &cli.command {
        Command::Gen(a) => gen(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Dist(a) => dist(&cfg, a),
        Command::Stats(a) => stats(a),
        Command::Select(a) => select(&cfg, a),
        Command::Probe(a) => probe(&cfg, a),
        Command::CompareCurriculum(a) => compare_curriculum(&cfg, a),
    }
}

fn apply_solver(cfg: &mut RunConfig, s: &SolverArgs) {
    set!(cfg.solver.epsilon, s.epsilon);
    set!(cfg.solver.max_iter, s.max_iter);
    set!(cfg.solver.tol, s.tol);
    set!(cfg.solver.gw_outer_iter, s.gw_outer_iter);
}

fn apply_flags(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => {
            set!(cfg.seed, a.seed);
            set!(cfg.corpus.domains, a.domains);
            set!(cfg.corpus.tasks, a.tasks);
            set!(cfg.corpus.n_way, a.n_way);
            set!(cfg.corpus.k_shot, a.k_shot);
            set!(cfg.corpus.queries, a.queries);
        }
        Command::Train(a) => {
            set!(cfg.seed, a.seed);
            set!(cfg.train.epochs, a.epochs);
            set!(cfg.train.batch_size, a.batch_size);
            set!(cfg.train.r, a.r);
            set!(cfg.train.tau, a.tau);
            set!(cfg.train.eta, a.eta);
            set!(cfg.train.hidden_dim, a.hidden_dim);
            set!(cfg.train.output_dim, a.output_dim);
            apply_solver(cfg, &a.solver);
        }
        Command::Dist(a) => {
            set!(cfg.select.r, a.r);
            apply_solver(cfg, &a.solver);
        }
        Command::Stats(_) => {}
        Command::Select(a) => {
            set!(cfg.select.m, a.m);
            set!(cfg.select.r, a.r);
            if let Some(s) = &a.graph_source {
                cfg.select.graph_source = s.parse::<GraphSource>()?;
            }
            apply_solver(cfg, &a.solver);
        }
        Command::Probe(a) => {
            set!(cfg.seed, a.seed);
            set!(cfg.probe.domain, a.domain);
            set!(cfg.probe.pairs, a.pairs);
            set!(cfg.probe.max_noise, a.max_noise);
            set!(cfg.probe.reference_shots, a.reference_shots);
            set!(cfg.probe.n_way, a.n_way);
            set!(cfg.probe.k_shot, a.k_shot);
            set!(cfg.probe.bins, a.bins);
            apply_solver(cfg, &a.solver);
        }
        Command::CompareCurriculum(a) => {
            set!(cfg.seed, a.seed);
            set!(cfg.curriculum.trials, a.trials);
            set!(cfg.curriculum.pool, a.pool);
            set!(cfg.curriculum.targets, a.targets);
            set!(cfg.curriculum.queries, a.queries);
            set!(cfg.curriculum.m, a.m);
            set!(cfg.curriculum.epochs, a.epochs);
            set!(cfg.curriculum.learning_rate, a.learning_rate);
            set!(cfg.select.r, a.r);
            apply_solver(cfg, &a.solver);
        }
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// The encoder named by `--checkpoint`, or the identity on `dim` inputs.
fn load_encoder(args: &EncoderArgs, dim: usize) -> Result<EncoderParams> {
    match (&args.checkpoint, args.identity) {
        (Some(path), _) => {
            read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
        }
        (None, true) => Ok(EncoderParams::identity(dim)),
        (None, false) => bail!(otts::Error::InvalidInput("pass --checkpoint FILE or --identity".into())),
    }
}

fn input_dim(tasks: &[Task]) -> Result<usize> {
    match tasks.first() {
        Some(t) => Ok(t.dim()),
        None => bail!(otts::Error::InvalidInput("task list is empty".into())),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Print `value` as JSON and also save it to `out` when given.
fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = to_json(value);
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    write_stdout(&text)
}

/// Write to stdout. A reader that closed the pipe early (`otts ... | head`)
/// is not a failure.
pub fn write_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
        _ => Ok(()),
    }
}

fn gen(cfg: &RunConfig, a: &GenArgs) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus.spec(cfg.seed))?;
    match a.format {
        CorpusFormat::Jsonl => write_corpus(&corpus, &a.out),
        CorpusFormat::Binary => write_corpus_binary(&corpus, &a.out),
    }
    .with_context(|| format!("writing corpus {}", a.out.display()))?;
    let counts = corpus.manifest.as_ref().map(|m| m.domain_counts.clone()).unwrap_or_default();
    emit(&serde_json::json!({ "tasks": corpus.tasks.len(), "domains": counts }), None)
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let tc = cfg.train_config();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (enc_path, state_path, log_path) =
        (a.out.join(ENCODER_FILE), a.out.join(STATE_FILE), a.out.join(LOG_FILE));
    let resume = if a.resume && state_path.exists() {
        Some(read_train_state(&state_path).with_context(|| format!("reading {}", state_path.display()))?)
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path).with_context(|| format!("removing {}", log_path.display()))?;
        }
        None
    };
    let (state, log) = train_with(&corpus.tasks, &tc, resume, |state, record| {
        write_checkpoint(&enc_path, &state.xi)?;
        write_train_state(&state_path, state)?;
        TrainLog::append_jsonl(&log_path, record)
    })?;
    // Also covers runs with no epochs left to do.
    write_checkpoint(&enc_path, &state.xi)?;
    write_train_state(&state_path, &state)?;
    emit(
        &serde_json::json!({
            "epochs": state.epoch,
            "first_loss": log.first_loss(),
            "last_loss": log.last_loss(),
            "checkpoint": enc_path,
        }),
        None,
    )
}

fn dist(cfg: &RunConfig, a: &DistArgs) -> Result<()> {
    let take = |mut c: Corpus| {
        if let Some(n) = a.limit {
            c.tasks.truncate(n);
        }
        c.tasks
    };
    let rows = take(load_corpus(&a.rows)?);
    let cols = match &a.cols {
        Some(p) => take(load_corpus(p)?),
        None => rows.clone(),
    };
    let xi = load_encoder(&a.encoder, input_dim(&rows)?)?;
    let m = pairwise_matrix(&rows, &cols, &xi, cfg.select.r, &cfg.solver)?;
    write_distance_matrix(&a.out, &m).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&serde_json::json!({ "rows": m.row_ids.len(), "cols": m.col_ids.len() }), None)
}

/// Domain tag of every id in `ids`, looked up in the corpus at `path`.
fn groups_for(ids: &[u64], path: Option<&PathBuf>) -> Result<Vec<String>> {
    let Some(path) = path else {
        return Ok(vec!["all".to_string(); ids.len()]);
    };
    let corpus = load_corpus(path)?;
    let tags: std::collections::HashMap<u64, String> = corpus
        .tasks
        .into_iter()
        .map(|t| (t.task_id, t.domain_tag.unwrap_or_else(|| "untagged".into())))
        .collect();
    ids.iter()
        .map(|id| {
            tags.get(id).cloned().ok_or_else(|| {
                otts::Error::InvalidInput(format!("task {id} not in {}", path.display())).into()
            })
        })
        .collect()
}

fn stats(a: &StatsArgs) -> Result<()> {
    let m = read_distance_matrix(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let rows = groups_for(&m.row_ids, a.rows_corpus.as_ref())?;
    let cols = groups_for(&m.col_ids, a.cols_corpus.as_ref().or(a.rows_corpus.as_ref()))?;
    let report = grouped_stats(&m, &rows, &cols, a.bins, a.skip_self)?;
    emit(&report, a.out.as_ref())
}

fn select(cfg: &RunConfig, a: &SelectArgs) -> Result<()> {
    let mut targets = load_corpus(&a.target)?.tasks;
    if let Some(id) = a.target_id {
        targets.retain(|t| t.task_id == id);
        if targets.is_empty() {
            bail!(otts::Error::InvalidInput(format!("no target task with id {id}")));
        }
    }
    let sources = load_corpus(&a.sources)?.tasks;
    let xi = load_encoder(&a.encoder, input_dim(&sources)?)?;
    let s = &cfg.select;
    let result = match targets.as_slice() {
        [one] => select_for_target(one, &sources, &xi, s.m, s.r, &cfg.solver, s.graph_source)?,
        many => select_for_targets(many, &sources, &xi, s.m, s.r, &cfg.solver, s.graph_source)?,
    };
    emit(&result, a.out.as_ref())
}

fn probe(cfg: &RunConfig, a: &ProbeArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let Some(manifest) = corpus.manifest.as_ref() else {
        bail!(otts::Error::InvalidInput("the probe needs a corpus manifest to draw tasks".into()));
    };
    let gens = manifest.spec.generators()?;
    let Some(gen) = gens.get(cfg.probe.domain) else {
        bail!(otts::Error::InvalidInput(format!(
            "domain {} out of range (corpus has {})",
            cfg.probe.domain,
            gens.len()
        )));
    };
    let xi = load_encoder(&a.encoder, gen.spec.dim)?;
    let (_, report) = domain_probe(gen, &xi, &cfg.probe.setup(cfg.seed), &cfg.solver)?;
    if let Some(path) = &a.out_csv {
        write_text(path, &report.to_csv())?;
    }
    if let Some(path) = &a.out_hist {
        write_text(path, &to_json(&report.distance_histogram))?;
    }
    emit(
        &serde_json::json!({
            "pairs": report.pairs.len(),
            "spearman": report.spearman,
            "lambda_max": report.lambda_max,
        }),
        None,
    )
}

fn compare_curriculum(cfg: &RunConfig, a: &CurriculumArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let xi = load_encoder(&a.encoder, input_dim(&corpus.tasks)?)?;
    let tc = cfg.curriculum.trial_config(cfg.seed, cfg.select.r, &cfg.solver);
    let report = curriculum_trials(&corpus, &xi, &tc)?;
    if let Some(path) = &a.out {
        write_text(path, &to_json(&report))?;
    }
    emit(
        &serde_json::json!({
            "trials": report.trials.len(),
            "loss_win_rate": report.loss_win_rate,
            "std_win_rate": report.std_win_rate,
        }),
        None,
    )
}
