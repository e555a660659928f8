//! Source-task selection by transport distance to a target task.
//!
//! Both tasks are embedded with the trained encoder, turned into graphs, and
//! compared with the mixed OT loss. The nearest sources make up the
//! curriculum for the target.

mod matrix;

pub use matrix::{read_distance_matrix, write_distance_matrix, DistanceMatrix, MATRIX_VERSION};

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::{build_graph, Task, TaskGraph};
use crate::ot::{ot_loss, SolverConfig};

/// Which samples of a task form its graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    /// The labeled support samples.
    #[default]
    Support,
    /// The held-out query samples, where a task carries them.
    Query,
}

impl GraphSource {
    fn features(self, task: &Task) -> Result<ndarray::Array2<f64>> {
        match self {
            GraphSource::Support => Ok(task.support_matrix()),
            GraphSource::Query if task.queries.is_empty() => Err(Error::invalid("task has no query samples")),
            GraphSource::Query => Ok(task.query_matrix()),
        }
    }
}

impl std::str::FromStr for GraphSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(Self::Support),
            "query" => Ok(Self::Query),
            _ => Err(Error::invalid(format!("graph source must be support or query, got {s:?}"))),
        }
    }
}

/// The graph of `task` under `encoder`.
pub fn embed_task(task: &Task, encoder: &EncoderParams, source: GraphSource) -> Result<TaskGraph> {
    let x = source.features(task)?;
    build_graph(&encoder.forward_batch(&x)?, task.task_id)
}

fn embed_all(tasks: &[Task], encoder: &EncoderParams, source: GraphSource) -> Result<Vec<TaskGraph>> {
    tasks.par_iter().map(|t| embed_task(t, encoder, source).map_err(|e| e.in_task(t.task_id))).collect()
}

/// Distance from `target` to every source, in source order. The target graph
/// is built from `target_source`; source graphs always from support samples.
pub fn score_sources_with(
    target: &Task,
    sources: &[Task],
    xi: &EncoderParams,
    r: f64,
    cfg: &SolverConfig,
    target_source: GraphSource,
) -> Result<Vec<(u64, f64)>> {
    if sources.is_empty() {
        return Err(Error::invalid("no source tasks to score"));
    }
    let g_target = embed_task(target, xi, target_source).map_err(|e| e.in_task(target.task_id))?;
    sources
        .par_iter()
        .map(|s| {
            let g = embed_task(s, xi, GraphSource::Support).map_err(|e| e.in_task(s.task_id))?;
            let d = ot_loss(&g_target, &g, r, cfg).map_err(|e| e.in_task(s.task_id))?;
            Ok((s.task_id, d))
        })
        .collect()
}

/// [`score_sources_with`] using the target's support samples.
pub fn score_sources(
    target: &Task,
    sources: &[Task],
    xi: &EncoderParams,
    r: f64,
    cfg: &SolverConfig,
) -> Result<Vec<(u64, f64)>> {
    score_sources_with(target, sources, xi, r, cfg, GraphSource::Support)
}

/// Ranked selection for one target, or the mean over several targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target_task_ids: Vec<u64>,
    pub m: usize,
    /// `(source task id, distance)`, ascending by distance then id.
    pub ranked: Vec<(u64, f64)>,
}

fn by_distance_then_id(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// The `m` smallest scores, ascending by `(distance, task id)`.
pub fn select_top_m(scores: &[(u64, f64)], m: usize) -> Result<Vec<(u64, f64)>> {
    if m == 0 || m > scores.len() {
        return Err(Error::invalid(format!("cannot select {m} of {} scored tasks", scores.len())));
    }
    if let Some((id, d)) = scores.iter().find(|(_, d)| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid(format!("task {id} has invalid distance {d}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(by_distance_then_id);
    sorted.truncate(m);
    Ok(sorted)
}

/// Top `m` sources for `target`.
pub fn select_for_target(
    target: &Task,
    sources: &[Task],
    xi: &EncoderParams,
    m: usize,
    r: f64,
    cfg: &SolverConfig,
    target_source: GraphSource,
) -> Result<SelectionResult> {
    let scores = score_sources_with(target, sources, xi, r, cfg, target_source)?;
    Ok(SelectionResult { target_task_ids: vec![target.task_id], m, ranked: select_top_m(&scores, m)? })
}

/// Top `m` sources by mean distance over all `targets`.
pub fn select_for_targets(
    targets: &[Task],
    sources: &[Task],
    xi: &EncoderParams,
    m: usize,
    r: f64,
    cfg: &SolverConfig,
    target_source: GraphSource,
) -> Result<SelectionResult> {
    if targets.is_empty() {
        return Err(Error::invalid("no target tasks"));
    }
    let mut mean = vec![0.0; sources.len()];
    for t in targets {
        let scores = score_sources_with(t, sources, xi, r, cfg, target_source)?;
        for (acc, (_, d)) in mean.iter_mut().zip(scores) {
            *acc += d;
        }
    }
    let scores: Vec<(u64, f64)> =
        sources.iter().zip(mean).map(|(s, total)| (s.task_id, total / targets.len() as f64)).collect();
    Ok(SelectionResult {
        target_task_ids: targets.iter().map(|t| t.task_id).collect(),
        m,
        ranked: select_top_m(&scores, m)?,
    })
}

/// Dense matrix of OT losses between two task lists, support graphs only.
pub fn pairwise_matrix(
    tasks_a: &[Task],
    tasks_b: &[Task],
    xi: &EncoderParams,
    r: f64,
    cfg: &SolverConfig,
) -> Result<DistanceMatrix> {
    if tasks_a.is_empty() || tasks_b.is_empty() {
        return Err(Error::invalid("both task lists must be non-empty"));
    }
    let ga = embed_all(tasks_a, xi, GraphSource::Support)?;
    let gb = embed_all(tasks_b, xi, GraphSource::Support)?;
    let cols = gb.len();
    // Each entry is computed independently; the indexed collect fixes the
    // layout regardless of scheduling.
    let values = (0..ga.len() * cols)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cols, k % cols);
            ot_loss(&ga[i], &gb[j], r, cfg).map_err(|e| {
                Error::invalid(format!("entry ({}, {}): {e}", tasks_a[i].task_id, tasks_b[j].task_id))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    DistanceMatrix::new(
        tasks_a.iter().map(|t| t.task_id).collect(),
        tasks_b.iter().map(|t| t.task_id).collect(),
        ndarray::Array2::from_shape_vec((ga.len(), cols), values).expect("shape matches"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Sample;

    fn task(id: u64, shift: f64) -> Task {
        let samples = (0..3).map(|c| Sample::new(vec![shift + c as f64, (c * c) as f64 * 0.5], c)).collect();
        Task::new(id, 3, 1, samples, None).unwrap()
    }

    #[test]
    fn tie_break_by_id() {
        let scores = [(7, 0.5), (3, 0.2), (9, 0.2)];
        assert_eq!(select_top_m(&scores, 2).unwrap(), vec![(3, 0.2), (9, 0.2)]);
        assert_eq!(select_top_m(&scores, 3).unwrap().len(), 3);
        assert!(select_top_m(&scores, 4).is_err());
        assert!(select_top_m(&scores, 0).is_err());
    }

    #[test]
    fn target_among_sources_ranks_first() {
        let sources: Vec<Task> = (0..4).map(|i| task(i, i as f64 * 0.7)).collect();
        let id = EncoderParams::identity(2);
        let cfg = SolverConfig::default();
        let sel = select_for_target(&sources[2], &sources, &id, 2, 0.5, &cfg, GraphSource::Support).unwrap();
        assert_eq!(sel.ranked[0].0, 2);
        assert!(sel.ranked[0].1 <= 1e-6);
        let one = score_sources(&sources[0], &sources[1..2], &id, 0.5, &cfg).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn identity_encoder_bypasses_to_raw_features() {
        let a = task(0, 0.0);
        let b = task(1, 1.3);
        let cfg = SolverConfig::default();
        let scored =
            score_sources(&a, std::slice::from_ref(&b), &EncoderParams::identity(2), 0.4, &cfg).unwrap();
        let ga = build_graph(&a.support_matrix(), 0).unwrap();
        let gb = build_graph(&b.support_matrix(), 1).unwrap();
        assert_eq!(scored[0].1, ot_loss(&ga, &gb, 0.4, &cfg).unwrap());
    }

    #[test]
    fn matrix_diagonal_and_single_entry() {
        let tasks: Vec<Task> = (0..3).map(|i| task(i, i as f64)).collect();
        let id = EncoderParams::identity(2);
        let cfg = SolverConfig::default();
        let m = pairwise_matrix(&tasks, &tasks, &id, 0.5, &cfg).unwrap();
        for i in 0..3 {
            assert!(m.values[[i, i]] <= 1e-6);
        }
        let single = pairwise_matrix(&tasks[..1], &tasks[1..2], &id, 0.5, &cfg).unwrap();
        let direct = score_sources(&tasks[0], &tasks[1..2], &id, 0.5, &cfg).unwrap();
        assert_eq!(single.values[[0, 0]], direct[0].1);
    }

    #[test]
    fn query_graphs_need_queries() {
        let t = task(0, 0.0);
        let id = EncoderParams::identity(2);
        let r = score_sources_with(
            &t,
            std::slice::from_ref(&t),
            &id,
            0.5,
            &SolverConfig::default(),
            GraphSource::Query,
        );
        assert!(r.is_err());
    }
}
