//! Self-supervised training of the task encoder.
//!
//! Every 2-shot task is split into two 1-shot halves that form a positive
//! pair. The online encoder embeds one half, the target encoder the other, and
//! the symmetric optimal-transport loss between the two graphs is minimized
//! with Adam on the online weights. The target weights follow the online ones
//! by exponential moving average and are what training returns.

mod log;
mod state;

pub use log::{EpochRecord, TrainLog};
pub use state::{read_train_state, write_train_state, TrainState, TRAIN_STATE_VERSION};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{adam_step, ema_update, grad_ot_loss, EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{split_task, Task};
use crate::ot::SolverConfig;
use crate::seed::derive_seed;

/// Seed streams derived from [`TrainConfig::seed`].
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the Wasserstein term; `1 - r` weights Gromov-Wasserstein.
    pub r: f64,
    /// Target decay rate.
    pub tau: f64,
    /// Adam learning rate.
    pub eta: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            r: 0.5,
            tau: 0.99,
            eta: 1e-3,
            seed: 0,
            hidden_dim: crate::encoder::DEFAULT_HIDDEN_DIM,
            output_dim: crate::encoder::DEFAULT_OUTPUT_DIM,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::invalid(format!("r must lie in (0, 1), got {}", self.r)));
        }
        crate::encoder::EmaConfig { tau: self.tau, eta: self.eta }.validate()?;
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        self.solver.validate()
    }

    /// Freshly initialized online encoder for `input_dim` features.
    pub fn initial_encoder(&self, input_dim: usize) -> Result<EncoderParams> {
        EncoderParams::mlp(
            &[input_dim, self.hidden_dim, self.output_dim],
            derive_seed(self.seed, &[STREAM_INIT]),
        )
    }

    /// The positive pair used for `task` under this configuration.
    pub fn positive_pair(&self, task: &Task) -> Result<(Task, Task)> {
        split_task(task, derive_seed(self.seed, &[STREAM_SPLIT, task.task_id]))
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub theta: EncoderParams,
    pub xi: EncoderParams,
    pub adam: crate::encoder::AdamState,
    /// Mean symmetric loss over the batch, before the update.
    pub mean_loss: f64,
    /// Per-task losses in batch order.
    pub task_losses: Vec<f64>,
    /// False if any solver call hit its iteration cap.
    pub converged: bool,
}

/// Mean symmetric pair loss and gradient over a batch, without updating.
pub fn batch_gradient(
    batch: &[Task],
    theta: &EncoderParams,
    xi: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, EncoderGrad, bool)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(t) = batch.iter().find(|t| t.k_shot != 2) {
        return Err(Error::invalid(format!(
            "task {} is {}-shot; training needs 2-shot tasks",
            t.task_id, t.k_shot
        )));
    }
    let per_task: Vec<_> = batch
        .par_iter()
        .map(|task| {
            let (a, b) = cfg.positive_pair(task)?;
            grad_ot_loss(theta, xi, &a, &b, cfg.r, &cfg.solver).map_err(|e| e.in_task(task.task_id))
        })
        .collect::<Result<_>>()?;
    // Fixed-order reduction keeps the sum independent of scheduling.
    let mut grad = EncoderGrad::zeros(theta.num_params());
    let mut losses = Vec::with_capacity(batch.len());
    let mut converged = true;
    for pg in &per_task {
        grad.add_assign(&pg.grad);
        losses.push(pg.loss);
        converged &= pg.converged;
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok((losses, grad, converged))
}

/// One training step: loss and gradient on the batch, Adam on the online
/// encoder, then the moving-average update of the target encoder.
pub fn ssl_step(
    batch: &[Task],
    theta: &EncoderParams,
    xi: &EncoderParams,
    adam: &crate::encoder::AdamState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let (task_losses, grad, converged) = batch_gradient(batch, theta, xi, cfg)?;
    let (theta_next, adam_next) = adam_step(theta, &grad, adam, cfg.eta)?;
    let xi_next = ema_update(xi, &theta_next, cfg.tau)?;
    Ok(StepOutcome {
        theta: theta_next,
        xi: xi_next,
        adam: adam_next,
        mean_loss: task_losses.iter().sum::<f64>() / task_losses.len() as f64,
        task_losses,
        converged,
    })
}

/// Train from scratch and return the target encoder and the log.
pub fn train(corpus: &[Task], cfg: &TrainConfig) -> Result<(EncoderParams, TrainLog)> {
    let (state, log) = train_with(corpus, cfg, None, |_, _| Ok(()))?;
    Ok((state.xi, log))
}

/// Train, optionally resuming from `resume`, calling `on_epoch` after every
/// completed epoch (e.g. to write a checkpoint).
pub fn train_with(
    corpus: &[Task],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let dim = corpus[0].dim();
    if let Some(t) = corpus.iter().find(|t| t.dim() != dim) {
        return Err(Error::shape(format!("task {} has dimension {}, expected {dim}", t.task_id, t.dim())));
    }
    let mut state = match resume {
        Some(s) => {
            if s.theta.input_dim() != dim {
                return Err(Error::shape("resumed encoder does not match the corpus dimension"));
            }
            s
        }
        None => TrainState::new(cfg.initial_encoder(dim)?),
    };
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(corpus.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Task> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let out = ssl_step(&batch, &state.theta, &state.xi, &state.adam, cfg)?;
            losses.extend(out.task_losses);
            state.theta = out.theta;
            state.xi = out.xi;
            state.adam = out.adam;
        }
        state.epoch += 1;
        let record =
            EpochRecord::from_losses(epoch, &losses, started.elapsed().as_secs_f64(), state.xi.param_version);
        on_epoch(&state, &record)?;
        log.records.push(record);
    }
    Ok((state, log))
}
