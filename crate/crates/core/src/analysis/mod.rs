//! Empirical checks and summaries on top of the distance machinery.
//!
//! * [`theorem1_probe`]: transport distance between two task graphs versus the
//!   gap in the joint likelihood a fixed softmax classifier assigns to them;
//! * [`distance_stats`] / [`grouped_stats`]: average, max and min of a
//!   distance matrix, overall and per block of domains, plus histograms;
//! * [`selection_vs_random_curriculum`]: trains a small probe on selected and
//!   on random source tasks and compares the two runs on the target.

mod curriculum;
mod probe;

pub use curriculum::{
    curriculum_trials, selection_vs_random_curriculum, ArmReport, CurriculumConfig, CurriculumReport, Trial,
    TrialConfig, TrialsReport, TARGET_ID_BASE,
};
pub use probe::{
    domain_probe, joint_log_likelihood, likelihood_gap, perturbed_pairs, theorem1_probe, ProbeClassifier,
    ProbeConfig, ProbePair, ProbeReport, ProbeSetup,
};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::ot::SolverConfig;
use crate::seed::derive_seed;
use crate::selector::{score_sources, select_top_m, DistanceMatrix};
use crate::synth::{sample_task, Corpus};

const STREAM_SELECTION_TARGET: u64 = 40;

/// Outcome of [`domain_selection_rate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRate {
    /// Per trial: target domain and the number of same-domain picks.
    pub trials: Vec<(String, usize)>,
    pub m: usize,
    /// Same-domain picks over all picks.
    pub rate: f64,
}

/// How often selection picks sources from the target's own domain.
///
/// Trial `s` draws one fresh target from domain `s mod n_domains` and selects
/// the top `m` of the `s`-th window of `pool` consecutive corpus tasks.
#[allow(clippy::too_many_arguments)]
pub fn domain_selection_rate(
    corpus: &Corpus,
    xi: &EncoderParams,
    trials: usize,
    pool: usize,
    m: usize,
    r: f64,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<SelectionRate> {
    let manifest = corpus
        .manifest
        .as_ref()
        .ok_or_else(|| Error::invalid("selection trials need a corpus manifest to draw targets"))?;
    let gens = manifest.spec.generators()?;
    let n = corpus.tasks.len();
    if gens.is_empty() || trials == 0 || pool == 0 || pool > n {
        return Err(Error::invalid(format!(
            "cannot run {trials} trials with pools of {pool} from {n} tasks"
        )));
    }
    let mut out = Vec::with_capacity(trials);
    for s in 0..trials {
        let gen = &gens[s % gens.len()];
        let target = sample_task(
            gen,
            manifest.spec.n_way,
            manifest.spec.k_shot,
            TARGET_ID_BASE + s as u64,
            derive_seed(seed, &[STREAM_SELECTION_TARGET, s as u64]),
        )?;
        let offset = (s * pool) % (n - pool + 1);
        let sources = &corpus.tasks[offset..offset + pool];
        let top = select_top_m(&score_sources(&target, sources, xi, r, cfg)?, m)?;
        let tag = &gen.spec.domain_tag;
        let same = top
            .iter()
            .filter(|(id, _)| sources.iter().any(|t| t.task_id == *id && t.domain_tag.as_ref() == Some(tag)))
            .count();
        out.push((tag.clone(), same));
    }
    let hits: usize = out.iter().map(|(_, k)| k).sum();
    Ok(SelectionRate { rate: hits as f64 / (trials * m) as f64, trials: out, m })
}

/// Equal-width histogram over `[edges[0], edges[bins]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histogram of `values` with `bins` equal-width bins spanning their range.
/// The last bin is closed on the right.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("histogram values must be finite"));
    }
    if values.is_empty() {
        return Ok(Histogram {
            edges: (0..=bins).map(|k| k as f64 / bins as f64).collect(),
            counts: vec![0; bins],
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Ranks starting at 1, ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = mean;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
/// Zero if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two observations"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average, max and min of a set of distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub average: f64,
    pub max: f64,
    pub min: f64,
    pub count: usize,
}

impl BlockStats {
    fn of<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<Self> {
        let mut s = Self { average: 0.0, max: f64::NEG_INFINITY, min: f64::INFINITY, count: 0 };
        for &v in values {
            s.average += v;
            s.max = s.max.max(v);
            s.min = s.min.min(v);
            s.count += 1;
        }
        (s.count > 0).then(|| Self { average: s.average / s.count as f64, ..s })
    }
}

/// Statistics of the whole matrix.
pub fn distance_stats(m: &DistanceMatrix) -> Result<BlockStats> {
    BlockStats::of(m.values.iter()).ok_or_else(|| Error::invalid("distance matrix is empty"))
}

/// Statistics of one block: rows from group `row_group`, columns from `col_group`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub row_group: String,
    pub col_group: String,
    pub stats: BlockStats,
    pub histogram: Histogram,
}

/// Full summary: overall statistics, histogram and per-block statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub overall: BlockStats,
    pub histogram: Histogram,
    pub blocks: Vec<BlockSummary>,
}

/// Per-block statistics. `row_groups[i]` names the group of row `i`, and
/// likewise for columns; blocks are listed in order of first appearance.
/// Diagonal entries of a square self-comparison are excluded when
/// `skip_self` is set and the row and column ids coincide.
pub fn grouped_stats(
    m: &DistanceMatrix,
    row_groups: &[String],
    col_groups: &[String],
    bins: usize,
    skip_self: bool,
) -> Result<StatsReport> {
    if row_groups.len() != m.row_ids.len() || col_groups.len() != m.col_ids.len() {
        return Err(Error::shape("one group label per row and per column is required"));
    }
    let overall = distance_stats(m)?;
    let histogram = histogram(m.values.as_slice().expect("standard layout"), bins)?;
    let order = |groups: &[String]| {
        let mut seen: Vec<String> = Vec::new();
        for g in groups {
            if !seen.contains(g) {
                seen.push(g.clone());
            }
        }
        seen
    };
    let mut blocks = Vec::new();
    for rg in order(row_groups) {
        for cg in order(col_groups) {
            let values: Vec<f64> = m
                .values
                .indexed_iter()
                .filter(|((i, j), _)| {
                    row_groups[*i] == rg
                        && col_groups[*j] == cg
                        && !(skip_self && m.row_ids[*i] == m.col_ids[*j])
                })
                .map(|(_, v)| *v)
                .collect();
            if let Some(stats) = BlockStats::of(&values) {
                blocks.push(BlockSummary {
                    row_group: rg.clone(),
                    col_group: cg.clone(),
                    stats,
                    histogram: self::histogram(&values, bins)?,
                });
            }
        }
    }
    Ok(StatsReport { overall, histogram, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn stats_by_hand() {
        let m = DistanceMatrix::new(vec![0, 1], vec![0, 1], array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = distance_stats(&m).unwrap();
        assert_eq!((s.average, s.max, s.min, s.count), (2.5, 4.0, 1.0, 4));
        let c = DistanceMatrix::new(vec![0, 1, 2], vec![5], Array2::from_elem((3, 1), 0.7)).unwrap();
        let s = distance_stats(&c).unwrap();
        assert_eq!((s.max, s.min), (0.7, 0.7));
        assert!((s.average - 0.7).abs() < 1e-15);
    }

    #[test]
    fn blocks_follow_groups() {
        let m = DistanceMatrix::new(
            vec![0, 1, 2],
            vec![0, 1, 2],
            array![[0.0, 1.0, 5.0], [1.0, 0.0, 6.0], [5.0, 6.0, 0.0]],
        )
        .unwrap();
        let g: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let rep = grouped_stats(&m, &g, &g, 4, true).unwrap();
        let block = |r: &str, c: &str| {
            rep.blocks.iter().find(|b| b.row_group == r && b.col_group == c).map(|b| b.stats)
        };
        assert_eq!(block("a", "a").unwrap().average, 1.0);
        assert_eq!(block("a", "b").unwrap().average, 5.5);
        // The only b-b entry is a diagonal one.
        assert!(block("b", "b").is_none());
        assert_eq!(rep.histogram.counts.iter().sum::<usize>(), 9);
    }

    #[test]
    fn histogram_edges_and_counts() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 3]);
        assert_eq!(histogram(&[2.0, 2.0], 3).unwrap().counts, vec![2, 0, 0]);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // With ties: ranks x = [1.5, 1.5, 3], y = [1, 2, 3].
        let rho = spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
        let expected = 1.5 / (1.5f64 * 2.0).sqrt();
        assert!((rho - expected).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }
}
