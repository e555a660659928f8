//! Gradient of the symmetric pair loss with respect to the online encoder.
//!
//! For a positive pair `(t1, t2)` the loss is
//!
//! ```text
//! L = L_OT(G_theta(t1), G_xi(t2)) + L_OT(G_theta(t2), G_xi(t1))
//! ```
//!
//! where `G_theta` embeds a task with the online encoder and `G_xi` with the
//! target encoder. The target branch is a constant.
//!
//! * Wasserstein: `d/dz_i <P, C> = sum_j D_ij u_ij` with `u_ij` the unit
//!   vector from `y_j` to `z_i` and `D = d<P, C>/dC` from
//!   [`sinkhorn_cost_gradient`], which also accounts for the entropic plan's
//!   dependence on the costs;
//! * Gromov-Wasserstein: with
//!   `S(i,k) = sum_{j,l} T_ij T_kl sign(C_a(i,k) - C_b(j,l))`, the objective
//!   changes by `2 S(i,k)` per unit change of the edge length `||z_i - z_k||`,
//!   with the plan held fixed. The solver returns a stationary plan, so the
//!   plan's own movement contributes nothing to first order.
//!
//! The resulting per-node gradients are backpropagated through the encoder.

use ndarray::Array2;

use super::{EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Task, TaskGraph};
use crate::ot::{ot_loss_parts, sinkhorn_cost_gradient, CostMatrix, SolverConfig};

/// Loss value, gradient and solver diagnostics for one positive pair.
#[derive(Clone, Debug)]
pub struct PairGradient {
    pub loss: f64,
    pub grad: EncoderGrad,
    /// False if any solver call stopped before reaching its tolerance; the
    /// gradient then uses the best plan found.
    pub converged: bool,
}

fn embed(p: &EncoderParams, task: &Task) -> Result<(Array2<f64>, TaskGraph)> {
    let x = task.support_matrix();
    let z = p.forward_batch(&x)?;
    let g = build_graph(&z, task.task_id)?;
    Ok((x, g))
}

/// Sign with `sign(0) = 0`, the subgradient choice at ties.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One order of the symmetric loss: value and `dL/dz` for the online nodes.
fn directional(
    theta: &EncoderParams,
    xi: &EncoderParams,
    online: &Task,
    target: &Task,
    r: f64,
    cfg: &SolverConfig,
) -> Result<(f64, EncoderGrad, bool)> {
    let (x, ga) = embed(theta, online)?;
    let (_, gb) = embed(xi, target)?;
    let parts = ot_loss_parts(&ga, &gb, r, cfg)?;
    let z = ga.nodes();
    let y = gb.nodes();
    let (n, m) = (ga.len(), gb.len());
    let mut dz = Array2::<f64>::zeros(z.dim());

    if let Some(w) = &parts.wasserstein {
        let cost = CostMatrix::euclidean(z, y)?;
        let sens = sinkhorn_cost_gradient(&cost, &w.plan, cfg.epsilon)?;
        for i in 0..n {
            for j in 0..m {
                let c = cost.entries()[[i, j]];
                if sens[[i, j]] == 0.0 || c == 0.0 {
                    continue;
                }
                let diff = &z.row(i) - &y.row(j);
                dz.row_mut(i).scaled_add(r * sens[[i, j]] / c, &diff);
            }
        }
    }

    if let Some(gw) = &parts.gromov {
        let t = &gw.plan.coupling;
        let (ca, cb) = (ga.intra_cost(), gb.intra_cost());
        for i in 0..n {
            for k in (i + 1)..n {
                let mut s = 0.0;
                for j in 0..m {
                    if t[[i, j]] == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for l in 0..m {
                        inner += t[[k, l]] * sign(ca[[i, k]] - cb[[j, l]]);
                    }
                    s += t[[i, j]] * inner;
                }
                let norm = ca[[i, k]];
                if s == 0.0 || norm == 0.0 {
                    continue;
                }
                let coef = (1.0 - r) * 2.0 * s / norm;
                let diff = &z.row(i) - &z.row(k);
                dz.row_mut(i).scaled_add(coef, &diff);
                dz.row_mut(k).scaled_add(-coef, &diff);
            }
        }
    }

    let grad = theta.backward(&x, &dz)?;
    Ok((parts.value, grad, parts.converged()))
}

fn check_pair(theta: &EncoderParams, xi: &EncoderParams, t1: &Task, t2: &Task) -> Result<()> {
    if !theta.same_shape(xi) {
        return Err(Error::shape("online and target encoders have different shapes"));
    }
    if t1.n_way != t2.n_way {
        return Err(Error::invalid("pair halves must share the same N-way structure"));
    }
    Ok(())
}

/// Symmetric pair loss and its gradient with respect to `theta`.
pub fn grad_ot_loss(
    theta: &EncoderParams,
    xi: &EncoderParams,
    t1: &Task,
    t2: &Task,
    r: f64,
    cfg: &SolverConfig,
) -> Result<PairGradient> {
    check_pair(theta, xi, t1, t2)?;
    let (l1, mut g, c1) = directional(theta, xi, t1, t2, r, cfg)?;
    let (l2, g2, c2) = directional(theta, xi, t2, t1, r, cfg)?;
    g.add_assign(&g2);
    Ok(PairGradient { loss: l1 + l2, grad: g, converged: c1 && c2 })
}

/// Symmetric pair loss without the gradient.
pub fn pair_loss(
    theta: &EncoderParams,
    xi: &EncoderParams,
    t1: &Task,
    t2: &Task,
    r: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_pair(theta, xi, t1, t2)?;
    let one = |a: &Task, b: &Task| -> Result<f64> {
        let (_, ga) = embed(theta, a)?;
        let (_, gb) = embed(xi, b)?;
        crate::ot::ot_loss(&ga, &gb, r, cfg)
    };
    Ok(one(t1, t2)? + one(t2, t1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_task(id: u64, n_way: usize, dim: usize, rng: &mut ChaCha8Rng) -> Task {
        let samples = (0..n_way)
            .map(|c| Sample::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), c))
            .collect();
        Task::new(id, n_way, 1, samples, None).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig { epsilon: 0.005, tol: 1e-8, max_iter: 5000, ..SolverConfig::default() }
    }

    /// Central differences of the forward loss, coordinate by coordinate.
    fn fd_grad(theta: &EncoderParams, xi: &EncoderParams, t1: &Task, t2: &Task, r: f64) -> Vec<f64> {
        let h = 1e-5;
        let flat = theta.flatten();
        (0..flat.len())
            .map(|i| {
                let mut p = flat.clone();
                p[i] += h;
                let up = pair_loss(&theta.with_flat(&p).unwrap(), xi, t1, t2, r, &tight()).unwrap();
                p[i] -= 2.0 * h;
                let down = pair_loss(&theta.with_flat(&p).unwrap(), xi, t1, t2, r, &tight()).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_error(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn identity_encoder_on_identical_tasks_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_task(0, 4, 3, &mut rng);
        let id = EncoderParams::identity(3);
        let g = grad_ot_loss(&id, &id, &t, &t, 0.5, &SolverConfig::default()).unwrap();
        assert!(g.loss <= 1e-6, "loss {}", g.loss);
        assert!(g.grad.norm() <= 1e-6, "gradient norm {}", g.grad.norm());
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = EncoderParams::mlp(&[3, 4, 2], 11).unwrap();
        let xi = EncoderParams::mlp(&[3, 4, 2], 12).unwrap();
        let t1 = random_task(0, 4, 3, &mut rng);
        let t2 = random_task(0, 4, 3, &mut rng);
        for r in [0.5, 1.0] {
            let analytic = grad_ot_loss(&theta, &xi, &t1, &t2, r, &tight()).unwrap();
            assert!(analytic.converged);
            let numeric = fd_grad(&theta, &xi, &t1, &t2, r);
            let err = max_error(&analytic.grad.0, &numeric);
            assert!(err < 1e-4, "r = {r}: relative error {err}");
        }
    }

    #[test]
    fn wasserstein_only_gradient_ignores_structure_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = EncoderParams::mlp(&[3, 4, 2], 1).unwrap();
        let xi = EncoderParams::mlp(&[3, 4, 2], 2).unwrap();
        let t1 = random_task(0, 4, 3, &mut rng);
        let t2 = random_task(0, 4, 3, &mut rng);
        let cfg = tight();
        let full = grad_ot_loss(&theta, &xi, &t1, &t2, 1.0, &cfg).unwrap();
        // With r = 1 the structure solver is never consulted, so its settings
        // cannot matter.
        let other = SolverConfig { gw_outer_iter: 1, ..cfg.clone() };
        let again = grad_ot_loss(&theta, &xi, &t1, &t2, 1.0, &other).unwrap();
        assert_eq!(full.grad, again.grad);
        let wd_loss = pair_loss(&theta, &xi, &t1, &t2, 1.0, &cfg).unwrap();
        assert_eq!(full.loss, wd_loss);
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_task(0, 3, 2, &mut rng);
        let b = random_task(1, 4, 2, &mut rng);
        let id = EncoderParams::identity(2);
        assert!(grad_ot_loss(&id, &id, &a, &b, 0.5, &SolverConfig::default()).is_err());
        let wide = EncoderParams::identity(3);
        assert!(grad_ot_loss(&id, &wide, &a, &a, 0.5, &SolverConfig::default()).is_err());
    }
}
