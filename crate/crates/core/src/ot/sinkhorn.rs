//! Log-domain Sinkhorn scaling.
//!
//! The plan is parameterized by dual potentials as
//! `P_ij = exp((f_i + g_j - C_ij) / eps)`. Alternately solving for `f` and `g`
//! with log-sum-exp keeps every intermediate finite even when `C_ij / eps`
//! reaches the thousands, which is where the kernel `exp(-C / eps)` would
//! underflow in the classical scaling form.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use super::{check_marginal, CostMatrix, OtResult, TransportPlan};
use crate::error::{Error, Result};

pub(crate) fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Entropic optimal transport between two discrete marginals.
///
/// `epsilon` is relative to the largest entry of `cost`. The returned distance
/// is the unregularized transport cost `<P, C>` of the entropic plan `P`.
/// `converged` reports whether the L1 marginal violation fell below `tol`
/// within `max_iter` sweeps; the returned plan is always projected onto the
/// exact marginals, so it is feasible either way.
///
/// Rows or columns with zero mass are dropped before scaling and come back as
/// zero rows or columns of the plan.
pub fn sinkhorn(
    cost: &CostMatrix,
    row_marginal: &Array1<f64>,
    col_marginal: &Array1<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<OtResult> {
    let c = cost.entries();
    if row_marginal.len() != c.nrows() || col_marginal.len() != c.ncols() {
        return Err(Error::shape(format!(
            "marginals of length ({}, {}) for a {}x{} cost",
            row_marginal.len(),
            col_marginal.len(),
            c.nrows(),
            c.ncols()
        )));
    }
    check_marginal("row", row_marginal)?;
    check_marginal("column", col_marginal)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }

    let scale = cost.max_entry();
    if scale == 0.0 {
        let plan = TransportPlan::product(row_marginal.clone(), col_marginal.clone());
        return Ok(OtResult { distance: 0.0, plan, iterations: 0, converged: true });
    }
    let normalized = c.mapv(|v| v / scale);
    let scaled =
        scale_to_marginals(&normalized, None, None, row_marginal, col_marginal, epsilon, max_iter, tol);
    let plan = TransportPlan {
        coupling: scaled.coupling,
        row_marginal: row_marginal.clone(),
        col_marginal: col_marginal.clone(),
    };
    Ok(OtResult { distance: plan.cost(c), plan, iterations: scaled.iterations, converged: scaled.converged })
}

/// Starting point for [`scale_to_marginals`].
#[derive(Clone, Copy)]
pub(crate) struct Warm<'a> {
    /// Column potentials, one per column of the cost.
    pub g: &'a [f64],
    /// Regularization at which `g` was obtained.
    pub from_eps: f64,
}

pub(crate) struct Scaled {
    pub coupling: Array2<f64>,
    /// Final column potentials (zero for dropped columns).
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Find `P_ij = exp((f_i + g_j - C_ij) / eps + prior_ij)` with row sums `a` and
/// column sums `b`.
///
/// `cost` should be scaled to a largest entry of about one. `prior` is an
/// optional log-reference plan (`log T` for a KL-proximal step); its entries
/// may be `-inf` as long as every row and column with positive mass keeps a
/// finite entry.
///
/// The regularization is first annealed geometrically from `max(1, eps)` down
/// to `eps` with a few warm-started Sinkhorn sweeps per stage. At the target
/// `eps` the column potentials are then refined by damped Newton steps on the
/// semi-dual, which converge quadratically where plain Sinkhorn crawls
/// (near-permutation plans at small `eps`). `max_iter` bounds the total number
/// of sweeps and Newton steps.
///
/// With `warm`, the column potentials start from those of a closely related
/// problem and the warm-up anneals only from `warm.from_eps`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scale_to_marginals(
    cost: &Array2<f64>,
    prior: Option<&Array2<f64>>,
    warm: Option<Warm<'_>>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Scaled {
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let pick =
        |m: &Array2<f64>| Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| m[[rows[i], cols[j]]]);
    let sub_cost = pick(cost);
    let sub_prior = match prior {
        Some(p) => pick(p),
        None => Array2::zeros((rows.len(), cols.len())),
    };
    let sa: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let sb: Vec<f64> = cols.iter().map(|&j| b[j]).collect();

    let problem = Dense { cost: &sub_cost, prior: &sub_prior, a: &sa, b: &sb, la: &[], lb: &[] };
    let la: Vec<f64> = sa.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = sb.iter().map(|v| v.ln()).collect();
    let problem = Dense { la: &la, lb: &lb, ..problem };
    let warm_sub = warm.map(|w| (cols.iter().map(|&j| w.g[j]).collect::<Vec<f64>>(), w.from_eps));
    let (sub_plan, sub_g, iterations, converged) =
        problem.solve(eps, max_iter, tol, warm_sub.as_ref().map(|(g, e)| (g.as_slice(), *e)));

    let mut coupling = Array2::zeros((a.len(), b.len()));
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            coupling[[i, j]] = sub_plan[[si, sj]];
        }
    }
    let mut g = vec![0.0; b.len()];
    for (sj, &j) in cols.iter().enumerate() {
        g[j] = sub_g[sj];
    }
    Scaled { coupling, g, iterations, converged }
}

/// `log sum_j exp(v_j)`, computed stably.
fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stage schedule factor for annealing the regularization.
const ANNEAL_FACTOR: f64 = 0.5;
const WARMUP_SWEEPS: usize = 20;
const WARMUP_TOL: f64 = 1e-3;
const MAX_BACKTRACK: usize = 30;

struct Dense<'a> {
    cost: &'a Array2<f64>,
    prior: &'a Array2<f64>,
    a: &'a [f64],
    b: &'a [f64],
    la: &'a [f64],
    lb: &'a [f64],
}

/// The log-kernel `-C / eps + prior` at one regularization level, row-major,
/// plus scratch space.
struct Kernel {
    n: usize,
    k: usize,
    eps: f64,
    log_k: Vec<f64>,
    scratch: Vec<f64>,
}

impl Kernel {
    fn new(problem: &Dense<'_>, eps: f64) -> Self {
        let (n, k) = problem.cost.dim();
        let log_k = problem.cost.iter().zip(problem.prior.iter()).map(|(c, p)| -c / eps + p).collect();
        Self { n, k, eps, log_k, scratch: vec![0.0; n.max(k)] }
    }

    /// `f_i = eps (log a_i - log sum_j exp(g_j / eps + logK_ij))`.
    fn row_potentials(&mut self, g: &[f64], log_a: &[f64], f: &mut [f64]) {
        let (n, k, eps) = (self.n, self.k, self.eps);
        for i in 0..n {
            let row = &self.log_k[i * k..(i + 1) * k];
            for j in 0..k {
                self.scratch[j] = g[j] / eps + row[j];
            }
            f[i] = eps * (log_a[i] - log_sum_exp(&self.scratch[..k]));
        }
    }

    fn col_potentials(&mut self, f: &[f64], log_b: &[f64], g: &mut [f64]) {
        let (n, k, eps) = (self.n, self.k, self.eps);
        for j in 0..k {
            for i in 0..n {
                self.scratch[i] = f[i] / eps + self.log_k[i * k + j];
            }
            g[j] = eps * (log_b[j] - log_sum_exp(&self.scratch[..n]));
        }
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> Array2<f64> {
        let eps = self.eps;
        Array2::from_shape_fn((self.n, self.k), |(i, j)| {
            ((f[i] + g[j]) / eps + self.log_k[i * self.k + j]).exp()
        })
    }
}

impl Dense<'_> {
    /// One f-sweep and one g-sweep; returns the L1 row violation afterwards.
    fn sweep(&self, kern: &mut Kernel, f: &mut [f64], g: &mut [f64]) -> f64 {
        kern.row_potentials(g, self.la, f);
        kern.col_potentials(f, self.lb, g);
        // Columns are exact after the g-sweep; measure the row error.
        let (k, eps) = (kern.k, kern.eps);
        (0..kern.n)
            .map(|i| {
                let row = &kern.log_k[i * k..(i + 1) * k];
                let s: f64 = (0..k).map(|j| ((f[i] + g[j]) / eps + row[j]).exp()).sum();
                (s - self.a[i]).abs()
            })
            .sum()
    }

    /// Up to `sweeps` Sinkhorn sweeps, stopping early once the L1 row
    /// violation drops below the warm-up tolerance; returns the sweeps done.
    ///
    /// The potentials are absorbed into a stabilized kernel
    /// `K_ij = exp((f_i + g_j) / eps + logK_ij)` and the sweeps run on
    /// multiplicative scalings `u`, `v`, which costs two matrix-vector
    /// products and no exponentials per sweep. The scalings are folded back
    /// into the potentials at the end, or earlier when one would leave a safe
    /// range; a sweep that cannot be done safely in this form is done in the
    /// log domain instead.
    fn scaled_sweeps(&self, kern: &mut Kernel, f: &mut [f64], g: &mut [f64], sweeps: usize) -> usize {
        const RANGE: f64 = 1e100;
        let (n, k, eps) = (kern.n, kern.k, kern.eps);
        let safe = |x: f64| x.is_finite() && x > 1.0 / RANGE && x < RANGE;
        let absorb = |kt: &mut Vec<f64>, log_k: &[f64], f: &[f64], g: &[f64]| {
            kt.clear();
            for i in 0..n {
                let row = &log_k[i * k..(i + 1) * k];
                kt.extend((0..k).map(|j| ((f[i] + g[j]) / eps + row[j]).exp()));
            }
        };
        let fold = |f: &mut [f64], g: &mut [f64], u: &[f64], v: &[f64]| {
            for (f, u) in f.iter_mut().zip(u) {
                *f += eps * u.ln();
            }
            for (g, v) in g.iter_mut().zip(v) {
                *g += eps * v.ln();
            }
        };

        // Exact rows keep every row of the stabilized kernel away from underflow.
        kern.row_potentials(g, self.la, f);
        let mut kt = Vec::with_capacity(n * k);
        absorb(&mut kt, &kern.log_k, f, g);
        let (mut u, mut v) = (vec![1.0; n], vec![1.0; k]);
        let (mut nu, mut nv) = (vec![0.0; n], vec![0.0; k]);
        for done in 1..=sweeps {
            for i in 0..n {
                let s: f64 = kt[i * k..(i + 1) * k].iter().zip(&v).map(|(x, v)| x * v).sum();
                nu[i] = self.a[i] / s;
            }
            nv.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                for (acc, x) in nv.iter_mut().zip(&kt[i * k..(i + 1) * k]) {
                    *acc += x * nu[i];
                }
            }
            for (nv, b) in nv.iter_mut().zip(self.b) {
                *nv = b / *nv;
            }
            let violation = if nu.iter().chain(&nv).all(|&x| safe(x)) {
                std::mem::swap(&mut u, &mut nu);
                std::mem::swap(&mut v, &mut nv);
                let violation: f64 = (0..n)
                    .map(|i| {
                        let s: f64 = kt[i * k..(i + 1) * k].iter().zip(&v).map(|(x, v)| x * v).sum();
                        (u[i] * s - self.a[i]).abs()
                    })
                    .sum();
                if u.iter().chain(&v).any(|&x| !(1e-50..=1e50).contains(&x)) {
                    fold(f, g, &u, &v);
                    absorb(&mut kt, &kern.log_k, f, g);
                    u.iter_mut().chain(v.iter_mut()).for_each(|x| *x = 1.0);
                }
                violation
            } else {
                fold(f, g, &u, &v);
                u.iter_mut().chain(v.iter_mut()).for_each(|x| *x = 1.0);
                let violation = self.sweep(kern, f, g);
                if violation.is_finite() {
                    absorb(&mut kt, &kern.log_k, f, g);
                }
                violation
            };
            if !violation.is_finite() {
                return done;
            }
            if violation < WARMUP_TOL {
                fold(f, g, &u, &v);
                return done;
            }
        }
        fold(f, g, &u, &v);
        sweeps
    }

    /// Semi-dual state at fixed `g`: row potentials `f(g)` (rows exact), the
    /// plan, its column sums and the dual objective.
    fn semi_dual(&self, kern: &mut Kernel, g: &[f64]) -> SemiDual {
        let mut f = vec![0.0; kern.n];
        kern.row_potentials(g, self.la, &mut f);
        let plan = kern.plan(&f, g);
        let cols: Vec<f64> = (0..kern.k).map(|j| plan.column(j).sum()).collect();
        let violation = cols.iter().zip(self.b).map(|(c, b)| (c - b).abs()).sum();
        let objective = self.a.iter().zip(&f).map(|(a, f)| a * f).sum::<f64>()
            + self.b.iter().zip(g).map(|(b, g)| b * g).sum::<f64>();
        SemiDual { f, plan, cols, violation, objective }
    }

    /// Newton direction for the concave semi-dual in `g`.
    fn newton_direction(&self, state: &SemiDual, eps: f64) -> Option<Vec<f64>> {
        let (n, k) = self.cost.dim();
        let mut h = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            h[(j, j)] += state.cols[j];
        }
        for i in 0..n {
            let row = state.plan.row(i);
            let w = 1.0 / self.a[i];
            for j in 0..k {
                if row[j] == 0.0 {
                    continue;
                }
                let wj = w * row[j];
                for l in 0..k {
                    h[(j, l)] -= wj * row[l];
                }
            }
        }
        // The Hessian is singular along the all-ones direction.
        let ridge = 1e-12 * state.cols.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for j in 0..k {
            h[(j, j)] += ridge;
        }
        let rhs = DVector::from_iterator(k, (0..k).map(|j| eps * (self.b[j] - state.cols[j])));
        let d = match h.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => h.lu().solve(&rhs)?,
        };
        d.iter().all(|v| v.is_finite()).then(|| d.iter().copied().collect())
    }

    fn solve(
        &self,
        eps: f64,
        max_iter: usize,
        tol: f64,
        warm: Option<(&[f64], f64)>,
    ) -> (Array2<f64>, Vec<f64>, usize, bool) {
        let (n, k) = self.cost.dim();
        let mut f = vec![0.0; n];
        let (mut g, mut stage) = match warm {
            Some((g, from)) => (g.to_vec(), from.max(eps)),
            None => (vec![0.0; k], eps.max(1.0)),
        };
        let mut iterations = 0;

        // Annealed Sinkhorn warm-up: coarse accuracy at each stage.
        while stage > eps && iterations < max_iter {
            let mut kern = Kernel::new(self, stage);
            iterations +=
                self.scaled_sweeps(&mut kern, &mut f, &mut g, WARMUP_SWEEPS.min(max_iter - iterations));
            stage = (stage * ANNEAL_FACTOR).max(eps);
        }

        // Newton on the semi-dual at the target regularization.
        let mut kern = Kernel::new(self, eps);
        let mut state = self.semi_dual(&mut kern, &g);
        let mut converged = state.violation < tol;
        while !converged && iterations < max_iter {
            iterations += 1;
            let mut improved = false;
            if let Some(d) = self.newton_direction(&state, eps) {
                let mut t = 1.0;
                for _ in 0..MAX_BACKTRACK {
                    let trial: Vec<f64> = g.iter().zip(&d).map(|(g, d)| g + t * d).collect();
                    let next = self.semi_dual(&mut kern, &trial);
                    if next.violation.is_finite()
                        && (next.violation < state.violation || next.objective > state.objective)
                    {
                        g = trial;
                        state = next;
                        improved = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !improved {
                // Fall back to a plain sweep.
                f.clone_from(&state.f);
                let v = self.sweep(&mut kern, &mut f, &mut g);
                if !v.is_finite() {
                    break;
                }
                state = self.semi_dual(&mut kern, &g);
            }
            converged = state.violation < tol;
        }

        let mut plan = state.plan;
        plan.mapv_inplace(|v| if v.is_finite() { v } else { 0.0 });
        round_to_marginals(&mut plan, self.a, self.b);
        (plan, g, iterations, converged)
    }
}

struct SemiDual {
    f: Vec<f64>,
    plan: Array2<f64>,
    cols: Vec<f64>,
    violation: f64,
    objective: f64,
}

/// Derivative of the entropic transport cost `<P*(C), C>` with respect to
/// every entry of `C`, given the plan returned by [`sinkhorn`] for the same
/// `cost` and `epsilon`.
///
/// Holding the plan fixed would give just `P`; that is the derivative of the
/// regularized objective, not of the transport cost alone. The plan's own
/// sensitivity is added by differentiating the optimality conditions
/// `P_ij = exp((f_i + g_j - C_ij / s) / eps)` (with `s` the largest cost
/// entry) under the marginal constraints, which costs one linear solve in the
/// dual potentials.
pub fn sinkhorn_cost_gradient(cost: &CostMatrix, plan: &TransportPlan, epsilon: f64) -> Result<Array2<f64>> {
    let c = cost.entries();
    let p = &plan.coupling;
    if p.dim() != c.dim() {
        return Err(Error::shape("plan and cost shapes differ"));
    }
    let scale = cost.max_entry();
    if scale == 0.0 {
        // The plan does not depend on an all-zero cost.
        return Ok(p.clone());
    }
    let rows: Vec<usize> = (0..c.nrows()).filter(|&i| plan.row_marginal[i] > 0.0).collect();
    let cols: Vec<usize> = (0..c.ncols()).filter(|&j| plan.col_marginal[j] > 0.0).collect();
    let (n, k) = (rows.len(), cols.len());
    let normalized = |i: usize, j: usize| c[[i, j]] / scale;

    // Hessian of the dual in (f, g), with g_k fixed to remove the shift freedom.
    let dim = n + k - 1;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut s = DVector::<f64>::zeros(dim);
    for (ii, &i) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            let v = p[[i, j]];
            let vc = v * normalized(i, j);
            h[(ii, ii)] += v;
            s[ii] += vc;
            if jj + 1 < k {
                h[(n + jj, n + jj)] += v;
                h[(ii, n + jj)] += v;
                h[(n + jj, ii)] += v;
                s[n + jj] += vc;
            }
        }
    }
    let w = match h.clone().cholesky() {
        Some(ch) => ch.solve(&s),
        None => {
            // A plan whose support splits into disconnected blocks has one
            // shift freedom per block. The system stays consistent and every
            // solution gives the same gradient on the support, so take the
            // minimum-norm one.
            let svd = h.svd(true, true);
            let cutoff = 1e-12 * svd.singular_values.max();
            svd.solve(&s, cutoff).map_err(|e| Error::invalid(format!("sensitivity system: {e}")))?
        }
    };
    let dual = |ii: usize, jj: usize| w[ii] + if jj + 1 < k { w[n + jj] } else { 0.0 };

    let mut grad = Array2::<f64>::zeros(c.dim());
    let mut weighted = 0.0;
    for (ii, &i) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            let cn = normalized(i, j);
            let g = p[[i, j]] * (1.0 + (dual(ii, jj) - cn) / epsilon);
            grad[[i, j]] = g;
            weighted += g * cn;
        }
    }
    // The normalization by the largest entry makes the plan depend on that
    // entry as well: <P, C> = s * phi(C / s).
    let phi: f64 = plan.cost(c) / scale;
    let (mut arg, mut best) = ((0, 0), f64::NEG_INFINITY);
    for ((i, j), &v) in c.indexed_iter() {
        if v > best {
            best = v;
            arg = (i, j);
        }
    }
    grad[arg] += phi - weighted;
    Ok(grad)
}

/// Project a nonnegative matrix onto the transport polytope of `(a, b)`.
///
/// Rows are scaled down to at most `a`, columns to at most `b`, and the
/// remaining deficit is filled with a rank-one correction. The result has the
/// exact marginals and differs from the input by at most twice the input's
/// L1 marginal violation.
pub(crate) fn round_to_marginals(plan: &mut Array2<f64>, a: &[f64], b: &[f64]) {
    let (n, k) = plan.dim();
    for i in 0..n {
        let s: f64 = plan.row(i).sum();
        if s > a[i] {
            let x = a[i] / s;
            plan.row_mut(i).mapv_inplace(|v| v * x);
        }
    }
    for j in 0..k {
        let s: f64 = plan.column(j).sum();
        if s > b[j] {
            let y = b[j] / s;
            plan.column_mut(j).mapv_inplace(|v| v * y);
        }
    }
    let err_r: Vec<f64> = (0..n).map(|i| (a[i] - plan.row(i).sum()).max(0.0)).collect();
    let err_c: Vec<f64> = (0..k).map(|j| (b[j] - plan.column(j).sum()).max(0.0)).collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..k {
                plan[[i, j]] += err_r[i] * err_c[j] / total;
            }
        }
    }
}
