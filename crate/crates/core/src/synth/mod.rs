//! Synthetic multi-domain corpora of few-shot tasks.
//!
//! A domain is a set of Gaussian classes in feature space. Class means are
//! scattered around a domain center; samples add isotropic noise stretched by
//! a per-axis profile that is specific to the domain. Everything is derived
//! from seeds, so a [`CorpusSpec`] regenerates its corpus byte for byte.

mod io;

pub use io::{
    corpus_from_binary, corpus_to_binary, read_corpus, read_tasks_jsonl, tasks_to_jsonl, write_corpus,
    write_corpus_binary, write_tasks_jsonl, CORPUS_VERSION, MANIFEST_FILE, TASKS_FILE,
};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Sample, Task};
use crate::seed::derive_seed;

const STREAM_DOMAIN: u64 = 10;
const STREAM_TASK: u64 = 11;

/// Parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_tag: String,
    pub n_classes: usize,
    /// Standard deviation of class means around the domain center.
    pub mean_scale: f64,
    /// Standard deviation of samples around their class mean.
    pub noise_scale: f64,
    /// Standard deviation of the domain center around the origin.
    pub center_scale: f64,
    /// Per-axis noise multipliers are drawn from `[1 - a, 1 + a]`; must lie in `[0, 1)`.
    pub anisotropy: f64,
    pub dim: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 {
            return Err(Error::invalid(format!(
                "domain {}: n_classes and dim must be positive",
                self.domain_tag
            )));
        }
        let scales = [self.mean_scale, self.noise_scale, self.center_scale];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid(format!(
                "domain {}: scales must be finite and nonnegative",
                self.domain_tag
            )));
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return Err(Error::invalid(format!("domain {}: anisotropy must lie in [0, 1)", self.domain_tag)));
        }
        Ok(())
    }
}

/// Class-conditional sampler for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainGenerator {
    pub spec: DomainSpec,
    pub center: Vec<f64>,
    /// `n_classes × dim` class means.
    pub class_means: Array2<f64>,
    /// Per-axis noise standard deviations.
    pub axis_noise: Vec<f64>,
}

/// Draw the class means and noise profile of a domain.
pub fn gen_domain(spec: &DomainSpec) -> Result<DomainGenerator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let center: Vec<f64> = (0..spec.dim).map(|_| spec.center_scale * normal()).collect();
    let class_means =
        Array2::from_shape_fn((spec.n_classes, spec.dim), |(_, d)| center[d] + spec.mean_scale * normal());
    let a = spec.anisotropy;
    let axis_noise =
        (0..spec.dim).map(|_| spec.noise_scale * (1.0 + a * (2.0 * rng.random::<f64>() - 1.0))).collect();
    Ok(DomainGenerator { spec: spec.clone(), center, class_means, axis_noise })
}

impl DomainGenerator {
    /// One sample of `class`.
    pub fn draw(&self, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        self.class_means
            .row(class)
            .iter()
            .zip(&self.axis_noise)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// An `n_way`-way `k_shot`-shot task from `gen`.
pub fn sample_task(
    gen: &DomainGenerator,
    n_way: usize,
    k_shot: usize,
    task_id: u64,
    seed: u64,
) -> Result<Task> {
    sample_task_with_queries(gen, n_way, k_shot, 0, task_id, seed)
}

/// Like [`sample_task`], plus `n_query` held-out samples per class.
///
/// Classes are chosen without replacement and relabeled `0..n_way` in the
/// order drawn. Support samples are listed by label, shots in draw order.
pub fn sample_task_with_queries(
    gen: &DomainGenerator,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    task_id: u64,
    seed: u64,
) -> Result<Task> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::invalid("n_way and k_shot must be positive"));
    }
    if n_way > gen.spec.n_classes {
        return Err(Error::invalid(format!(
            "{n_way}-way task from a domain with {} classes",
            gen.spec.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample(&mut rng, gen.spec.n_classes, n_way).into_vec();
    let mut samples = Vec::with_capacity(n_way * k_shot);
    let mut queries = Vec::with_capacity(n_way * n_query);
    for (label, &class) in classes.iter().enumerate() {
        for _ in 0..k_shot {
            samples.push(Sample::new(gen.draw(class, &mut rng), label));
        }
        for _ in 0..n_query {
            queries.push(Sample::new(gen.draw(class, &mut rng), label));
        }
    }
    Task::new(task_id, n_way, k_shot, samples, Some(gen.spec.domain_tag.clone()))?.with_queries(queries)
}

/// Everything that determines a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub domains: Vec<DomainSpec>,
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default)]
    pub n_query: usize,
    pub seed: u64,
}

/// Default shape of a synthetic domain.
pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_CLASSES: usize = 20;

impl CorpusSpec {
    /// `n_domains` domains with the default shape, tasks sampled round-robin.
    pub fn with_domains(n_domains: usize, n_tasks: usize, seed: u64) -> Self {
        let domains = (0..n_domains)
            .map(|d| DomainSpec {
                domain_tag: format!("domain-{d}"),
                n_classes: DEFAULT_CLASSES,
                mean_scale: 1.0,
                noise_scale: 0.3,
                center_scale: 1.0,
                anisotropy: 0.5,
                dim: DEFAULT_DIM,
                seed: derive_seed(seed, &[STREAM_DOMAIN, d as u64]),
            })
            .collect();
        Self { domains, n_tasks, n_way: 5, k_shot: 2, n_query: 0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() && self.n_tasks > 0 {
            return Err(Error::invalid("corpus needs at least one domain"));
        }
        for d in &self.domains {
            d.validate()?;
            if d.dim != self.domains[0].dim {
                return Err(Error::invalid("all domains must share one feature dimension"));
            }
        }
        Ok(())
    }

    pub fn generators(&self) -> Result<Vec<DomainGenerator>> {
        self.domains.iter().map(gen_domain).collect()
    }

    /// Seed of task `index`.
    pub fn task_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &[STREAM_TASK, index as u64])
    }
}

impl Default for CorpusSpec {
    /// Three domains, 2048 five-way two-shot tasks.
    fn default() -> Self {
        Self::with_domains(3, 2048, 0)
    }
}

/// Provenance of a corpus: its spec plus per-domain task counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: CorpusSpec,
    pub domain_counts: Vec<(String, usize)>,
}

/// A list of tasks with optional provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Option<Manifest>,
    pub tasks: Vec<Task>,
}

impl Corpus {
    /// Check structural validity and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            t.validate().map_err(|e| e.in_task(t.task_id))?;
            if !seen.insert(t.task_id) {
                return Err(Error::invalid(format!("duplicate task id {}", t.task_id)));
            }
        }
        Ok(())
    }

    /// Tasks whose domain tag equals `tag`.
    pub fn domain(&self, tag: &str) -> Vec<&Task> {
        self.tasks.iter().filter(|t| t.domain_tag.as_deref() == Some(tag)).collect()
    }
}

/// Generate the corpus described by `spec`. Task `i` has id `i` and comes
/// from domain `i mod n_domains`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let gens = spec.generators()?;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    let mut counts = vec![0usize; gens.len()];
    for i in 0..spec.n_tasks {
        let d = i % gens.len();
        counts[d] += 1;
        tasks.push(sample_task_with_queries(
            &gens[d],
            spec.n_way,
            spec.k_shot,
            spec.n_query,
            i as u64,
            spec.task_seed(i),
        )?);
    }
    let manifest = Manifest {
        format: io::MANIFEST_FORMAT.to_string(),
        version: CORPUS_VERSION,
        spec: spec.clone(),
        domain_counts: spec.domains.iter().zip(counts).map(|(d, c)| (d.domain_tag.clone(), c)).collect(),
    };
    Ok(Corpus { manifest: Some(manifest), tasks })
}
