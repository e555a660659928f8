//! Few-shot tasks and the fully-connected graphs built from their samples.
//!
//! A task graph has one node per labeled support sample. Node features are the
//! (embedded) sample vectors and edge weights are pairwise Euclidean distances,
//! so the graph depends on the features only through their geometry.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A single labeled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// An N-way K-shot task.
///
/// `samples` are the labeled support shots. `queries` are optional held-out
/// samples of the same classes; their labels exist only for evaluation and are
/// never consulted by selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub task_id: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub samples: Vec<Sample>,
    pub queries: Vec<Sample>,
    pub domain_tag: Option<String>,
}

impl Task {
    /// Build a task and check that it is exactly `n_way`-way `k_shot`-shot.
    pub fn new(
        task_id: u64,
        n_way: usize,
        k_shot: usize,
        samples: Vec<Sample>,
        domain_tag: Option<String>,
    ) -> Result<Self> {
        let task = Self { task_id, n_way, k_shot, samples, queries: Vec::new(), domain_tag };
        task.validate()?;
        Ok(task)
    }

    pub fn with_queries(mut self, queries: Vec<Sample>) -> Result<Self> {
        self.queries = queries;
        self.validate()?;
        Ok(self)
    }

    /// Structural check: K shots for each of the N labels, one shared dimension,
    /// finite features.
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::invalid(format!("task {}: n_way and k_shot must be positive", self.task_id)));
        }
        if self.samples.len() != self.n_way * self.k_shot {
            return Err(Error::invalid(format!(
                "task {}: expected {} samples for {}-way {}-shot, found {}",
                self.task_id,
                self.n_way * self.k_shot,
                self.n_way,
                self.k_shot,
                self.samples.len()
            )));
        }
        let dim = self.samples[0].features.len();
        if dim == 0 {
            return Err(Error::invalid(format!("task {}: empty feature vector", self.task_id)));
        }
        let mut counts = vec![0usize; self.n_way];
        for s in self.samples.iter().chain(&self.queries) {
            if s.features.len() != dim {
                return Err(Error::shape(format!(
                    "task {}: feature dimension {} differs from {}",
                    self.task_id,
                    s.features.len(),
                    dim
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("task {}: non-finite feature", self.task_id)));
            }
            if s.label >= self.n_way {
                return Err(Error::invalid(format!(
                    "task {}: label {} outside 0..{}",
                    self.task_id, s.label, self.n_way
                )));
            }
        }
        for s in &self.samples {
            counts[s.label] += 1;
        }
        if let Some(label) = counts.iter().position(|&c| c != self.k_shot) {
            return Err(Error::invalid(format!(
                "task {}: label {} has {} shots, expected {}",
                self.task_id, label, counts[label], self.k_shot
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Support features as an `n × D` matrix, in sample order.
    pub fn support_matrix(&self) -> Array2<f64> {
        rows_to_matrix(self.samples.iter().map(|s| s.features.as_slice()), self.dim())
    }

    /// Query features as an `m × D` matrix (possibly zero rows).
    pub fn query_matrix(&self) -> Array2<f64> {
        rows_to_matrix(self.queries.iter().map(|s| s.features.as_slice()), self.dim())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len().checked_div(dim).unwrap_or(0);
    Array2::from_shape_vec((n, dim), flat).expect("rows share one dimension")
}

/// Options for the graph builder.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphOptions {
    /// Scale every node feature to unit L2 norm before computing edges.
    pub l2_normalize: bool,
}

/// Fully-connected graph over a task's sample features.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGraph {
    nodes: Array2<f64>,
    intra_cost: Array2<f64>,
    source_task: u64,
}

impl TaskGraph {
    /// `n × D` node feature matrix.
    pub fn nodes(&self) -> &Array2<f64> {
        &self.nodes
    }

    /// `n × n` pairwise Euclidean distances between nodes.
    pub fn intra_cost(&self) -> &Array2<f64> {
        &self.intra_cost
    }

    pub fn source_task(&self) -> u64 {
        self.source_task
    }

    pub fn len(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    /// The same graph with every node feature multiplied by `s`.
    pub fn scaled(&self, s: f64) -> TaskGraph {
        TaskGraph {
            nodes: self.nodes.mapv(|v| v * s),
            intra_cost: self.intra_cost.mapv(|v| v * s),
            source_task: self.source_task,
        }
    }
}

/// Euclidean distance between two feature rows.
pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Build the fully-connected graph of a feature matrix (one node per row).
pub fn build_graph(features: &Array2<f64>, task_id: u64) -> Result<TaskGraph> {
    build_graph_with(features, task_id, GraphOptions::default())
}

pub fn build_graph_with(features: &Array2<f64>, task_id: u64, opts: GraphOptions) -> Result<TaskGraph> {
    let n = features.nrows();
    if n == 0 || features.ncols() == 0 {
        return Err(Error::invalid("cannot build a graph from an empty feature matrix"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("task {task_id}: non-finite feature")));
    }
    let mut nodes = features.to_owned();
    if opts.l2_normalize {
        for mut row in nodes.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    let mut intra_cost = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(nodes.row(i), nodes.row(j));
            intra_cost[[i, j]] = d;
            intra_cost[[j, i]] = d;
        }
    }
    Ok(TaskGraph { nodes, intra_cost, source_task: task_id })
}

/// Graph over a task's raw support samples.
pub fn task_graph(task: &Task) -> Result<TaskGraph> {
    build_graph(&task.support_matrix(), task.task_id)
}

/// Split an N-way 2-shot task into two sample-disjoint N-way 1-shot tasks.
///
/// For each class a seeded coin decides which of its two shots goes to the
/// first half. Both halves list their samples in ascending label order and keep
/// the parent's task id and domain tag.
pub fn split_task(task: &Task, seed: u64) -> Result<(Task, Task)> {
    if task.k_shot != 2 {
        return Err(Error::invalid(format!(
            "task {}: split requires 2-shot tasks, got {}-shot",
            task.task_id, task.k_shot
        )));
    }
    task.validate()?;
    let mut by_label: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in &task.samples {
        by_label.entry(s.label).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(task.n_way);
    let mut second = Vec::with_capacity(task.n_way);
    for shots in by_label.values() {
        let (a, b) = if rng.random_bool(0.5) { (shots[1], shots[0]) } else { (shots[0], shots[1]) };
        first.push(a.clone());
        second.push(b.clone());
    }
    let half = |samples| Task {
        task_id: task.task_id,
        n_way: task.n_way,
        k_shot: 1,
        samples,
        queries: Vec::new(),
        domain_tag: task.domain_tag.clone(),
    };
    Ok((half(first), half(second)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_shot(n_way: usize) -> Task {
        let samples = (0..n_way)
            .flat_map(|c| (0..2).map(move |k| Sample::new(vec![c as f64, k as f64, 0.5], c)))
            .collect();
        Task::new(7, n_way, 2, samples, Some("d0".into())).unwrap()
    }

    #[test]
    fn one_row_gives_single_node() {
        let g = build_graph(&array![[1.0, 2.0]], 3).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.intra_cost(), &array![[0.0]]);
        assert_eq!(g.source_task(), 3);
    }

    #[test]
    fn three_four_five() {
        let g = build_graph(&array![[0.0, 0.0], [3.0, 4.0]], 0).unwrap();
        assert_eq!(g.intra_cost(), &array![[0.0, 5.0], [5.0, 0.0]]);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(build_graph(&empty, 0), Err(Error::InvalidInput(_))));
        let bad = array![[0.0, f64::NAN]];
        assert!(matches!(build_graph(&bad, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn l2_normalize_option() {
        let g = build_graph_with(&array![[3.0, 4.0], [0.0, 2.0]], 0, GraphOptions { l2_normalize: true })
            .unwrap();
        assert!((g.nodes()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((g.nodes()[[1, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_five_way() {
        let t = two_shot(5);
        let (a, b) = split_task(&t, 11).unwrap();
        assert_eq!((a.n_way, a.k_shot, a.samples.len()), (5, 1, 5));
        assert_eq!((b.n_way, b.k_shot, b.samples.len()), (5, 1, 5));
        a.validate().unwrap();
        b.validate().unwrap();
        for s in &a.samples {
            assert!(!b.samples.contains(s));
        }
        let mut union: Vec<_> = a.samples.iter().chain(&b.samples).cloned().collect();
        let mut orig = t.samples.clone();
        let key = |s: &Sample| (s.label, s.features[1] as i64);
        union.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(union, orig);
    }

    #[test]
    fn split_one_way_is_one_of_two_orders() {
        let t = two_shot(1);
        let (s1, s2) = (&t.samples[0], &t.samples[1]);
        let mut seen = [false, false];
        for seed in 0..32 {
            let (a, b) = split_task(&t, seed).unwrap();
            if &a.samples[0] == s1 {
                assert_eq!(&b.samples[0], s2);
                seen[0] = true;
            } else {
                assert_eq!((&a.samples[0], &b.samples[0]), (s2, s1));
                seen[1] = true;
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn split_is_deterministic() {
        let t = two_shot(5);
        assert_eq!(split_task(&t, 5).unwrap(), split_task(&t, 5).unwrap());
    }

    #[test]
    fn split_rejects_other_shots() {
        let samples = (0..3).map(|c| Sample::new(vec![c as f64], c)).collect();
        let t = Task::new(1, 3, 1, samples, None).unwrap();
        assert!(matches!(split_task(&t, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unbalanced_task_rejected() {
        let samples = vec![
            Sample::new(vec![0.0], 0),
            Sample::new(vec![1.0], 0),
            Sample::new(vec![2.0], 1),
            Sample::new(vec![3.0], 0),
        ];
        assert!(Task::new(1, 2, 2, samples, None).is_err());
    }
}
