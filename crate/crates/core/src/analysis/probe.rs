//! Distance versus likelihood gap.
//!
//! A fixed softmax classifier `w` assigns a task graph the joint likelihood
//! `p(Y | G, w) = prod_i p(y_i | z_i, w)` of its labels. If two graphs are
//! close in transport distance, their joint likelihoods should be close too.
//! The probe measures both quantities over many pairs and reports their rank
//! correlation.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{histogram, spearman, Histogram};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::{Sample, Task};
use crate::ot::{wasserstein, SolverConfig};
use crate::selector::{embed_task, GraphSource};
use crate::synth::DomainGenerator;

/// Gaps may exceed 1 by this much through rounding before the check fails.
const GAP_SLACK: f64 = 1e-9;

/// Linear softmax classifier over standardized embeddings:
/// `logits = W (z - shift) / scale + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    /// `n_classes × dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub shift: Array1<f64>,
    pub scale: f64,
}

/// Full-batch gradient descent settings for [`ProbeClassifier::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights.
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.5, l2: 1e-3 }
    }
}

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in logits {
        *l -= lse;
    }
}

impl ProbeClassifier {
    /// A classifier acting on raw embeddings.
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() || weights.nrows() == 0 {
            return Err(Error::shape("need one bias per class and at least one class"));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("classifier weights must be finite"));
        }
        let dim = weights.ncols();
        Ok(Self { weights, bias, shift: Array1::zeros(dim), scale: 1.0 })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `log p(y = k | z)` for every class `k`.
    pub fn log_probs(&self, z: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::shape(format!(
                "embedding has {} entries, classifier expects {}",
                z.len(),
                self.dim()
            )));
        }
        let x = (&z - &self.shift) / self.scale;
        let mut logits = (self.weights.dot(&x) + &self.bias).to_vec();
        log_softmax(&mut logits);
        Ok(logits)
    }

    /// Fit on labeled embeddings by full-batch gradient descent on the mean
    /// cross-entropy, starting from zero weights.
    pub fn fit(
        features: &Array2<f64>,
        labels: &[usize],
        n_classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        let (n, dim) = features.dim();
        if n == 0 || n != labels.len() {
            return Err(Error::shape(format!("{n} feature rows for {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
        }
        let shift = features.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let centered = features - &shift;
        let rms = (centered.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let scale = if rms > 0.0 { rms } else { 1.0 };
        let x = centered / scale;
        let mut w = Array2::<f64>::zeros((n_classes, dim));
        let mut b = Array1::<f64>::zeros(n_classes);
        for _ in 0..cfg.epochs {
            let mut logits = x.dot(&w.t()) + &b;
            for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
                let mut r = row.to_vec();
                log_softmax(&mut r);
                for (k, v) in row.iter_mut().enumerate() {
                    *v = r[k].exp() - if k == y { 1.0 } else { 0.0 };
                }
            }
            // `logits` now holds dL/dlogits per sample.
            let gw = logits.t().dot(&x) / n as f64 + &w * cfg.l2;
            let gb = logits.sum_axis(ndarray::Axis(0)) / n as f64;
            w.scaled_add(-cfg.learning_rate, &gw);
            b.scaled_add(-cfg.learning_rate, &gb);
        }
        Ok(Self { weights: w, bias: b, shift, scale })
    }

    /// Fraction of rows whose most likely class equals the label.
    pub fn accuracy(&self, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        let mut hits = 0;
        for (z, &y) in features.rows().into_iter().zip(labels) {
            let lp = self.log_probs(z)?;
            let best = (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap_or(0);
            hits += usize::from(best == y);
        }
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// `log p(Y | G, w) = sum_i log p(y_i | z_i, w)` over the graph's nodes.
pub fn joint_log_likelihood(w: &ProbeClassifier, nodes: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if nodes.nrows() != labels.len() {
        return Err(Error::shape("one label per node is required"));
    }
    let mut total = 0.0;
    for (z, &y) in nodes.rows().into_iter().zip(labels) {
        let lp = w.log_probs(z)?;
        total += *lp
            .get(y)
            .ok_or_else(|| Error::invalid(format!("label {y} out of range for {} classes", lp.len())))?;
    }
    Ok(total)
}

/// `|exp(a) - exp(b)|` for log-likelihoods `a, b <= 0`, without forming the
/// difference of two tiny numbers.
pub fn likelihood_gap(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return 0.0;
    }
    hi.exp() * -(lo - hi).exp_m1()
}

/// One probed pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub pair_id: usize,
    pub distance: f64,
    pub gap: f64,
}

/// Result of [`theorem1_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pairs: Vec<ProbePair>,
    /// Spearman correlation between distance and gap.
    pub spearman: f64,
    pub distance_histogram: Histogram,
    /// Largest eigenvalue of the pooled within-class covariance of the
    /// embedded samples; context for the noise level, not a test statistic.
    pub lambda_max: f64,
}

impl ProbeReport {
    /// `pair_id,distance,gap` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,distance,gap\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{:?},{:?}\n", p.pair_id, p.distance, p.gap));
        }
        out
    }
}

/// Largest eigenvalue of the covariance of `deviations` (rows).
fn max_eigenvalue(deviations: &[Vec<f64>]) -> f64 {
    let Some(dim) = deviations.first().map(Vec::len) else {
        return 0.0;
    };
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for d in deviations {
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    cov /= deviations.len() as f64;
    SymmetricEigen::new(cov).eigenvalues.max()
}

/// Distance and likelihood gap for every pair, with both tasks embedded by
/// `xi` and scored by `w` against their own labels.
pub fn theorem1_probe(
    pairs: &[(Task, Task)],
    w: &ProbeClassifier,
    xi: &EncoderParams,
    cfg: &SolverConfig,
    bins: usize,
) -> Result<ProbeReport> {
    if pairs.len() < 2 {
        return Err(Error::invalid("the probe needs at least two pairs"));
    }
    let measured = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            if a.n_way != b.n_way {
                return Err(Error::invalid(format!("pair {k}: tasks differ in N-way structure")));
            }
            let ga = embed_task(a, xi, GraphSource::Support).map_err(|e| e.in_task(a.task_id))?;
            let gb = embed_task(b, xi, GraphSource::Support).map_err(|e| e.in_task(b.task_id))?;
            let distance = wasserstein(&ga, &gb, cfg)?.distance;
            let la = joint_log_likelihood(w, ga.nodes(), &a.labels())?;
            let lb = joint_log_likelihood(w, gb.nodes(), &b.labels())?;
            let gap = likelihood_gap(la, lb);
            if !(0.0..=1.0 + GAP_SLACK).contains(&gap) {
                return Err(Error::invalid(format!("pair {k}: likelihood gap {gap} outside [0, 1]")));
            }
            Ok((ProbePair { pair_id: k, distance, gap }, ga, gb))
        })
        .collect::<Result<Vec<_>>>()?;

    // Pooled within-class spread of all embedded samples, by label.
    let n_classes = pairs.iter().map(|(a, _)| a.n_way).max().unwrap_or(0);
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_classes];
    for ((a, b), (_, ga, gb)) in pairs.iter().zip(&measured) {
        for (task, g) in [(a, ga), (b, gb)] {
            for (z, y) in g.nodes().rows().into_iter().zip(task.labels()) {
                by_class[y].push(z.to_vec());
            }
        }
    }
    let mut deviations = Vec::new();
    for members in by_class.iter().filter(|m| m.len() > 1) {
        let dim = members[0].len();
        let mean: Vec<f64> =
            (0..dim).map(|d| members.iter().map(|z| z[d]).sum::<f64>() / members.len() as f64).collect();
        deviations.extend(members.iter().map(|z| z.iter().zip(&mean).map(|(v, m)| v - m).collect()));
    }

    let pairs: Vec<ProbePair> = measured.into_iter().map(|(p, _, _)| p).collect();
    let distances: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    let gaps: Vec<f64> = pairs.iter().map(|p| p.gap).collect();
    Ok(ProbeReport {
        spearman: spearman(&distances, &gaps)?,
        distance_histogram: histogram(&distances, bins)?,
        lambda_max: max_eigenvalue(&deviations),
        pairs,
    })
}

/// A labeled reference task plus probe pairs from one domain.
///
/// `n_way` classes are fixed once, so label `k` means the same class in every
/// task. The reference task holds `reference_shots` samples per class for
/// fitting the classifier. Pair `k` is a fresh `k_shot` task and a copy whose
/// features carry extra Gaussian noise with a standard deviation drawn
/// uniformly from `[0, max_noise]`; pairs thus span near-identical to clearly
/// different graphs with the same labels.
pub fn perturbed_pairs(
    gen: &DomainGenerator,
    n_way: usize,
    k_shot: usize,
    n_pairs: usize,
    max_noise: f64,
    reference_shots: usize,
    seed: u64,
) -> Result<(Task, Vec<(Task, Task)>)> {
    if n_way == 0 || n_way > gen.spec.n_classes || k_shot == 0 || reference_shots == 0 {
        return Err(Error::invalid("invalid probe task shape"));
    }
    if !(max_noise >= 0.0 && max_noise.is_finite()) {
        return Err(Error::invalid("max_noise must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample(&mut rng, gen.spec.n_classes, n_way).into_vec();
    let draw_task = |id: u64, shots: usize, rng: &mut ChaCha8Rng| -> Result<Task> {
        let samples = classes
            .iter()
            .enumerate()
            .flat_map(|(label, &c)| (0..shots).map(move |_| (label, c)))
            .map(|(label, c)| Sample::new(gen.draw(c, rng), label))
            .collect();
        Task::new(id, n_way, shots, samples, Some(gen.spec.domain_tag.clone()))
    };
    let reference = draw_task(0, reference_shots, &mut rng)?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let base = draw_task(2 * k as u64 + 1, k_shot, &mut rng)?;
        let sigma = max_noise * rng.random::<f64>();
        let samples = base
            .samples
            .iter()
            .map(|s| {
                let f = s.features.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                Sample::new(f, s.label)
            })
            .collect();
        let other = Task::new(base.task_id + 1, n_way, k_shot, samples, base.domain_tag.clone())?;
        pairs.push((base, other));
    }
    Ok((reference, pairs))
}

/// Settings of [`domain_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSetup {
    pub pairs: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Largest perturbation standard deviation.
    pub max_noise: f64,
    /// Shots per class of the task the classifier is fitted on.
    pub reference_shots: usize,
    /// Bins of the distance histogram.
    pub bins: usize,
    pub seed: u64,
    pub classifier: ProbeConfig,
}

impl Default for ProbeSetup {
    fn default() -> Self {
        Self {
            pairs: 200,
            n_way: 5,
            k_shot: 1,
            max_noise: 1.0,
            reference_shots: 40,
            bins: 20,
            seed: 7,
            classifier: ProbeConfig::default(),
        }
    }
}

/// Draw perturbed pairs from `gen`, fit the classifier on the embedded
/// reference task and run [`theorem1_probe`].
pub fn domain_probe(
    gen: &DomainGenerator,
    xi: &EncoderParams,
    setup: &ProbeSetup,
    cfg: &SolverConfig,
) -> Result<(ProbeClassifier, ProbeReport)> {
    let (reference, pairs) = perturbed_pairs(
        gen,
        setup.n_way,
        setup.k_shot,
        setup.pairs,
        setup.max_noise,
        setup.reference_shots,
        setup.seed,
    )?;
    let z = xi.forward_batch(&reference.support_matrix())?;
    let w = ProbeClassifier::fit(&z, &reference.labels(), setup.n_way, &setup.classifier)?;
    let report = theorem1_probe(&pairs, &w, xi, cfg, setup.bins)?;
    Ok((w, report))
}
