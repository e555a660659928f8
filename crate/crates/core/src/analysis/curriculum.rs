//! Does training on selected source tasks help the target?
//!
//! The probe is a prototype classifier with a learned linear metric: class
//! prototypes are embedded support samples, and a query's logits are
//! `-||A (e_q - mu_k)||^2`. Only `A` is trained, episodically, one source
//! task at a time: its first shot per class gives the prototypes, the other
//! shots are the queries. The same probe is trained twice from the same
//! start, once on the `m` selected sources and once on `m` sources drawn
//! uniformly, and then evaluated on the targets' held-out queries with the
//! targets' own supports as prototypes.
//!
//! After every step `A` is rescaled to its initial Frobenius norm. Without
//! this, any easy episode keeps sharpening the softmax by inflating `A`, and
//! the comparison would mostly measure how much each pool inflated it. With
//! the norm fixed, only the shape of the metric is learned from the sources,
//! which is what task similarity can plausibly transfer.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::Task;
use crate::ot::SolverConfig;
use crate::seed::derive_seed;
use crate::selector::{select_for_targets, GraphSource};
use crate::synth::{sample_task_with_queries, Corpus};

const STREAM_RANDOM_POOL: u64 = 30;
const STREAM_ORDER: u64 = 31;
const STREAM_TARGETS: u64 = 32;
const STREAM_TRIAL: u64 = 33;

/// Ids of generated target tasks start here, far from corpus ids.
pub const TARGET_ID_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Number of source tasks each arm trains on.
    pub m: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mixing weight of the selection distance.
    pub r: f64,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { m: 30, epochs: 20, learning_rate: 0.05, r: 0.5, seed: 0, solver: SolverConfig::default() }
    }
}

/// Outcome of one training run of the probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub task_ids: Vec<u64>,
    /// Mean episode loss per epoch.
    pub epoch_mean_loss: Vec<f64>,
    /// Standard deviation of the episode losses within each epoch.
    pub epoch_loss_std: Vec<f64>,
    /// Mean of `epoch_loss_std`: how much the loss fluctuates from episode
    /// to episode during training.
    pub loss_std: f64,
    /// Cross-entropy on the targets' queries after training.
    pub final_loss: f64,
    /// Accuracy on the targets' queries after training.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub target_task_ids: Vec<u64>,
    pub selected: ArmReport,
    pub random: ArmReport,
}

/// One embedded episode: prototypes plus labeled queries.
struct Episode {
    prototypes: Array2<f64>,
    queries: Vec<(Array1<f64>, usize)>,
}

fn embed(xi: &EncoderParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    xi.forward_batch(x)
}

/// Prototypes as per-class means of `support`, in label order.
fn prototypes(z: &Array2<f64>, labels: &[usize], n_way: usize) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((n_way, z.ncols()));
    let mut counts = vec![0usize; n_way];
    for (row, &y) in z.rows().into_iter().zip(labels) {
        p.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    for (mut row, c) in p.rows_mut().into_iter().zip(counts) {
        row /= c.max(1) as f64;
    }
    p
}

/// First shot per class as support, the remaining shots as queries.
fn source_episode(task: &Task, xi: &EncoderParams) -> Result<Episode> {
    if task.k_shot < 2 {
        return Err(Error::invalid(format!(
            "task {}: probe episodes need at least two shots per class",
            task.task_id
        )));
    }
    let z = embed(xi, &task.support_matrix())?;
    let labels = task.labels();
    let mut seen = vec![false; task.n_way];
    let mut prototypes = Array2::<f64>::zeros((task.n_way, z.ncols()));
    let mut queries = Vec::new();
    for (row, &y) in z.rows().into_iter().zip(&labels) {
        if seen[y] {
            queries.push((row.to_owned(), y));
        } else {
            seen[y] = true;
            prototypes.row_mut(y).assign(&row);
        }
    }
    Ok(Episode { prototypes, queries })
}

/// Target support as prototypes, target queries as queries.
fn target_episode(task: &Task, xi: &EncoderParams) -> Result<Episode> {
    if task.queries.is_empty() {
        return Err(Error::invalid(format!("target task {} has no query samples", task.task_id)));
    }
    let z = embed(xi, &task.support_matrix())?;
    let q = embed(xi, &task.query_matrix())?;
    Ok(Episode {
        prototypes: prototypes(&z, &task.labels(), task.n_way),
        queries: q
            .rows()
            .into_iter()
            .zip(task.queries.iter().map(|s| s.label))
            .map(|(r, y)| (r.to_owned(), y))
            .collect(),
    })
}

/// Mean cross-entropy, accuracy and (optionally) the gradient with respect
/// to `a` over the queries of one episode.
fn episode_loss(a: &Array2<f64>, ep: &Episode, grad: Option<&mut Array2<f64>>) -> (f64, f64) {
    let n_way = ep.prototypes.nrows();
    let mut loss = 0.0;
    let mut hits = 0;
    let mut g = Array2::<f64>::zeros(a.dim());
    for (q, y) in &ep.queries {
        let diffs: Vec<Array1<f64>> = (0..n_way).map(|k| q - &ep.prototypes.row(k)).collect();
        let mapped: Vec<Array1<f64>> = diffs.iter().map(|d| a.dot(d)).collect();
        let logits: Vec<f64> = mapped.iter().map(|u| -u.dot(u)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[*y];
        let best = (0..n_way).max_by(|&i, &j| logits[i].total_cmp(&logits[j]).then(j.cmp(&i))).unwrap_or(0);
        hits += usize::from(best == *y);
        for k in 0..n_way {
            // d logit_k / dA = -2 (A d_k) d_k^T
            let coef = (logits[k] - lse).exp() - if k == *y { 1.0 } else { 0.0 };
            if coef != 0.0 {
                let outer = mapped[k]
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&diffs[k].view().insert_axis(ndarray::Axis(0)));
                g.scaled_add(-2.0 * coef, &outer);
            }
        }
    }
    let n = ep.queries.len().max(1) as f64;
    if let Some(out) = grad {
        *out = g / n;
    }
    (loss / n, hits as f64 / n)
}

/// Initial metric: the identity scaled so target prototype gaps are order one.
fn initial_metric(targets: &[Episode]) -> Array2<f64> {
    let dim = targets[0].prototypes.ncols();
    let (mut total, mut count) = (0.0, 0usize);
    for ep in targets {
        let p = &ep.prototypes;
        for i in 0..p.nrows() {
            for j in (i + 1)..p.nrows() {
                let d = &p.row(i) - &p.row(j);
                total += d.dot(&d).sqrt();
                count += 1;
            }
        }
    }
    let spread = if count > 0 && total > 0.0 { total / count as f64 } else { 1.0 };
    Array2::eye(dim) / spread
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn train_arm(
    pool: &[&Task],
    xi: &EncoderParams,
    targets: &[Episode],
    start: &Array2<f64>,
    cfg: &CurriculumConfig,
) -> Result<ArmReport> {
    let episodes: Vec<Episode> = pool
        .iter()
        .map(|t| source_episode(t, xi).map_err(|e| e.in_task(t.task_id)))
        .collect::<Result<_>>()?;
    let mut a = start.clone();
    let start_norm = frobenius(start);
    let mut grad = Array2::<f64>::zeros(a.dim());
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let (mut epoch_mean_loss, mut epoch_loss_std) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        // Same visiting order for both arms: it depends only on the seed.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_ORDER, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for &k in &order {
            let (loss, _) = episode_loss(&a, &episodes[k], Some(&mut grad));
            losses.push(loss);
            a.scaled_add(-cfg.learning_rate, &grad);
            let norm = frobenius(&a);
            if norm > 0.0 {
                a *= start_norm / norm;
            }
        }
        epoch_mean_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        epoch_loss_std.push(std_dev(&losses));
    }
    let (mut final_loss, mut accuracy) = (0.0, 0.0);
    for ep in targets {
        let (l, acc) = episode_loss(&a, ep, None);
        final_loss += l;
        accuracy += acc;
    }
    let n = targets.len() as f64;
    if !final_loss.is_finite() {
        return Err(Error::invalid("probe training diverged; lower the learning rate"));
    }
    Ok(ArmReport {
        task_ids: pool.iter().map(|t| t.task_id).collect(),
        loss_std: epoch_loss_std.iter().sum::<f64>() / epoch_loss_std.len().max(1) as f64,
        epoch_mean_loss,
        epoch_loss_std,
        final_loss: final_loss / n,
        accuracy: accuracy / n,
    })
}

/// Train the probe on the `m` sources nearest to `targets` (mean distance)
/// and on `m` uniformly drawn sources, and compare both on the targets.
pub fn selection_vs_random_curriculum(
    sources: &[Task],
    targets: &[Task],
    xi: &EncoderParams,
    cfg: &CurriculumConfig,
) -> Result<CurriculumReport> {
    if targets.is_empty() {
        return Err(Error::invalid("no target tasks"));
    }
    if cfg.m == 0 || cfg.m > sources.len() {
        return Err(Error::invalid(format!("cannot draw {} of {} source tasks", cfg.m, sources.len())));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    let target_eps: Vec<Episode> = targets
        .iter()
        .map(|t| target_episode(t, xi).map_err(|e| e.in_task(t.task_id)))
        .collect::<Result<_>>()?;
    let start = initial_metric(&target_eps);

    let selection =
        select_for_targets(targets, sources, xi, cfg.m, cfg.r, &cfg.solver, GraphSource::Support)?;
    let by_id: std::collections::HashMap<u64, &Task> = sources.iter().map(|t| (t.task_id, t)).collect();
    let selected: Vec<&Task> = selection.ranked.iter().map(|(id, _)| by_id[id]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_RANDOM_POOL]));
    let mut picks = sample(&mut rng, sources.len(), cfg.m).into_vec();
    picks.sort_unstable();
    let random: Vec<&Task> = picks.into_iter().map(|i| &sources[i]).collect();

    Ok(CurriculumReport {
        target_task_ids: targets.iter().map(|t| t.task_id).collect(),
        selected: train_arm(&selected, xi, &target_eps, &start, cfg)?,
        random: train_arm(&random, xi, &target_eps, &start, cfg)?,
    })
}

/// Settings of [`curriculum_trials`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub trials: usize,
    /// Size of the source window per trial; 0 uses the whole corpus.
    pub pool: usize,
    /// Target tasks per trial, all from one domain.
    pub targets: usize,
    /// Held-out queries per class of every target task.
    pub queries: usize,
    pub curriculum: CurriculumConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            pool: 100,
            targets: 3,
            queries: 5,
            curriculum: CurriculumConfig { m: 10, ..CurriculumConfig::default() },
        }
    }
}

/// One trial of [`curriculum_trials`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub target_domain: String,
    pub report: CurriculumReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialsReport {
    pub trials: Vec<Trial>,
    /// Fraction of trials where the selected arm ends with the lower target loss.
    pub loss_win_rate: f64,
    /// Fraction of trials where the selected arm has the lower loss spread.
    pub std_win_rate: f64,
}

/// Repeat [`selection_vs_random_curriculum`] over fresh targets.
///
/// Trial `s` draws its targets from domain `s mod n_domains` of the corpus
/// manifest and uses the `s`-th window of `pool` consecutive corpus tasks as
/// sources, so every trial sees a different pool.
pub fn curriculum_trials(corpus: &Corpus, xi: &EncoderParams, cfg: &TrialConfig) -> Result<TrialsReport> {
    let manifest = corpus
        .manifest
        .as_ref()
        .ok_or_else(|| Error::invalid("curriculum trials need a corpus manifest to draw targets"))?;
    let gens = manifest.spec.generators()?;
    if gens.is_empty() || cfg.trials == 0 || cfg.targets == 0 || cfg.queries == 0 {
        return Err(Error::invalid("need domains, trials, targets and queries"));
    }
    let n = corpus.tasks.len();
    let pool = if cfg.pool == 0 { n } else { cfg.pool };
    if pool > n {
        return Err(Error::invalid(format!("pool of {pool} from a corpus of {n} tasks")));
    }
    let mut trials = Vec::with_capacity(cfg.trials);
    for s in 0..cfg.trials {
        let gen = &gens[s % gens.len()];
        let base = cfg.curriculum.seed;
        let targets = (0..cfg.targets)
            .map(|k| {
                sample_task_with_queries(
                    gen,
                    manifest.spec.n_way,
                    manifest.spec.k_shot,
                    cfg.queries,
                    TARGET_ID_BASE + (s * cfg.targets + k) as u64,
                    derive_seed(base, &[STREAM_TARGETS, s as u64, k as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let offset = (s * pool) % (n - pool + 1);
        let trial_cfg =
            CurriculumConfig { seed: derive_seed(base, &[STREAM_TRIAL, s as u64]), ..cfg.curriculum.clone() };
        let report =
            selection_vs_random_curriculum(&corpus.tasks[offset..offset + pool], &targets, xi, &trial_cfg)?;
        trials.push(Trial { trial: s, target_domain: gen.spec.domain_tag.clone(), report });
    }
    let rate = |f: &dyn Fn(&CurriculumReport) -> bool| {
        trials.iter().filter(|t| f(&t.report)).count() as f64 / trials.len() as f64
    };
    Ok(TrialsReport {
        loss_win_rate: rate(&|r| r.selected.final_loss < r.random.final_loss),
        std_win_rate: rate(&|r| r.selected.loss_std < r.random.loss_std),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_gradient_matches_finite_differences() {
        let ep = Episode {
            prototypes: ndarray::array![[0.0, 0.0], [1.0, 0.5], [-0.3, 1.2]],
            queries: vec![
                (ndarray::array![0.2, 0.1], 0),
                (ndarray::array![0.8, 0.9], 1),
                (ndarray::array![0.1, 0.7], 2),
            ],
        };
        let a = ndarray::array![[0.9, 0.2], [-0.1, 1.3]];
        let mut g = Array2::zeros((2, 2));
        episode_loss(&a, &ep, Some(&mut g));
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let (mut up, mut dn) = (a.clone(), a.clone());
                up[[i, j]] += h;
                dn[[i, j]] -= h;
                let num = (episode_loss(&up, &ep, None).0 - episode_loss(&dn, &ep, None).0) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-7, "({i},{j}): {num} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn rejects_bad_pools() {
        let xi = EncoderParams::identity(2);
        let cfg = CurriculumConfig { m: 3, ..Default::default() };
        assert!(selection_vs_random_curriculum(&[], &[], &xi, &cfg).is_err());
    }
}
