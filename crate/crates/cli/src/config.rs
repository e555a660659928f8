//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.

use serde::{Deserialize, Serialize};

use otts::analysis::{CurriculumConfig, ProbeConfig, ProbeSetup, TrialConfig};
use otts::ot::SolverConfig;
use otts::selector::GraphSource;
use otts::synth::{CorpusSpec, DEFAULT_CLASSES, DEFAULT_DIM};
use otts::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed of every random choice.
    pub seed: u64,
    /// Worker threads; unset means the available parallelism.
    pub threads: Option<usize>,
    pub solver: SolverConfig,
    pub corpus: CorpusOptions,
    pub train: TrainOptions,
    pub select: SelectOptions,
    pub probe: ProbeOptions,
    pub curriculum: CurriculumOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub domains: usize,
    pub tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub classes: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub noise_scale: f64,
    pub center_scale: f64,
    pub anisotropy: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        let d = CorpusSpec::default();
        let dom = &d.domains[0];
        Self {
            domains: d.domains.len(),
            tasks: d.n_tasks,
            n_way: d.n_way,
            k_shot: d.k_shot,
            queries: d.n_query,
            classes: DEFAULT_CLASSES,
            dim: DEFAULT_DIM,
            mean_scale: dom.mean_scale,
            noise_scale: dom.noise_scale,
            center_scale: dom.center_scale,
            anisotropy: dom.anisotropy,
        }
    }
}

impl CorpusOptions {
    pub fn spec(&self, seed: u64) -> CorpusSpec {
        let mut spec = CorpusSpec::with_domains(self.domains, self.tasks, seed);
        spec.n_way = self.n_way;
        spec.k_shot = self.k_shot;
        spec.n_query = self.queries;
        for d in &mut spec.domains {
            d.n_classes = self.classes;
            d.dim = self.dim;
            d.mean_scale = self.mean_scale;
            d.noise_scale = self.noise_scale;
            d.center_scale = self.center_scale;
            d.anisotropy = self.anisotropy;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    pub r: f64,
    pub tau: f64,
    pub eta: f64,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            r: t.r,
            tau: t.tau,
            eta: t.eta,
            hidden_dim: t.hidden_dim,
            output_dim: t.output_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectOptions {
    pub m: usize,
    /// Mixing weight used for scoring, distance matrices and probes.
    pub r: f64,
    pub graph_source: GraphSource,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { m: 10, r: TrainConfig::default().r, graph_source: GraphSource::Support }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub pairs: usize,
    /// Index of the corpus domain the probe tasks come from.
    pub domain: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub max_noise: f64,
    pub reference_shots: usize,
    pub bins: usize,
    pub classifier: ProbeConfig,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        let p = ProbeSetup::default();
        Self {
            pairs: p.pairs,
            domain: 0,
            n_way: p.n_way,
            k_shot: p.k_shot,
            max_noise: p.max_noise,
            reference_shots: p.reference_shots,
            bins: p.bins,
            classifier: p.classifier,
        }
    }
}

impl ProbeOptions {
    pub fn setup(&self, seed: u64) -> ProbeSetup {
        ProbeSetup {
            pairs: self.pairs,
            n_way: self.n_way,
            k_shot: self.k_shot,
            max_noise: self.max_noise,
            reference_shots: self.reference_shots,
            bins: self.bins,
            seed,
            classifier: self.classifier.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumOptions {
    pub trials: usize,
    pub pool: usize,
    pub targets: usize,
    pub queries: usize,
    pub m: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for CurriculumOptions {
    fn default() -> Self {
        let t = TrialConfig::default();
        Self {
            trials: t.trials,
            pool: t.pool,
            targets: t.targets,
            queries: t.queries,
            m: t.curriculum.m,
            epochs: t.curriculum.epochs,
            learning_rate: t.curriculum.learning_rate,
        }
    }
}

impl CurriculumOptions {
    pub fn trial_config(&self, seed: u64, r: f64, solver: &SolverConfig) -> TrialConfig {
        TrialConfig {
            trials: self.trials,
            pool: self.pool,
            targets: self.targets,
            queries: self.queries,
            curriculum: CurriculumConfig {
                m: self.m,
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                r,
                seed,
                solver: solver.clone(),
            },
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            r: t.r,
            tau: t.tau,
            eta: t.eta,
            seed: self.seed,
            hidden_dim: t.hidden_dim,
            output_dim: t.output_dim,
            solver: self.solver.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig { seed: 17, threads: Some(3), ..RunConfig::default() };
        c.solver.epsilon = 0.0123456789;
        c.train.eta = 3.3e-4;
        c.select.graph_source = GraphSource::Query;
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        let defaults = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&defaults).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3").is_err());
        let partial: RunConfig = toml::from_str("[train]\nepochs = 3").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, TrainOptions::default().batch_size);
    }

    #[test]
    fn default_corpus_matches_library_default() {
        assert_eq!(CorpusOptions::default().spec(0), CorpusSpec::default());
    }
}
