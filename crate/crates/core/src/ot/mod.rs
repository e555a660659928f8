//! Optimal-transport distances between task graphs.
//!
//! Three quantities are computed here:
//!
//! * the Wasserstein distance between the node sets of two graphs, with ground
//!   cost `c_ij = ||z_i - z_j||_2` and uniform node masses,
//! * the Gromov-Wasserstein distance between their edge structures, with
//!   distortion kernel `|C_a(i,i') - C_b(j,j')|`,
//! * the mixed loss `r * W + (1 - r) * GW`.
//!
//! Both distances are solved with entropic regularization in the log domain.
//! The regularization strength `epsilon` is relative: every cost matrix handed
//! to Sinkhorn is scaled by its largest entry first, so `epsilon = 0.01` means
//! one percent of the largest cost regardless of the feature scale.
//! [`exact_wd_oracle`] enumerates permutations and serves as ground truth for
//! small instances.

mod gromov;
mod loss;
mod oracle;
mod sinkhorn;

pub use gromov::{gromov_wasserstein, gromov_wasserstein_costs, gw_objective};
pub use loss::{ot_loss, ot_loss_parts, wasserstein, OtLossParts};
pub use oracle::{exact_assignment_cost, exact_wd_oracle, MAX_ORACLE_NODES};
pub(crate) use sinkhorn::uniform;
pub use sinkhorn::{sinkhorn, sinkhorn_cost_gradient};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on marginal sums accepted as "a probability vector".
pub const MARGINAL_SUM_TOL: f64 = 1e-9;

/// Dense nonnegative ground-cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    /// Wrap a matrix, rejecting empty, negative or non-finite entries.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::invalid("cost matrix must be non-empty"));
        }
        if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cost matrix has non-finite entry {v}")));
        }
        if let Some(v) = entries.iter().find(|v| **v < 0.0) {
            return Err(Error::invalid(format!("cost matrix has negative entry {v}")));
        }
        Ok(Self(entries))
    }

    /// Pairwise Euclidean costs between the rows of two feature matrices.
    pub fn euclidean(a: &Array2<f64>, b: &Array2<f64>) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::shape(format!("feature dimensions differ: {} vs {}", a.ncols(), b.ncols())));
        }
        let entries = Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
            crate::graph::euclidean(a.row(i), b.row(j))
        });
        Self::new(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn col_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn max_entry(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// A coupling matrix together with the marginals it was solved for.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl TransportPlan {
    /// The independent coupling `a b^T`.
    pub fn product(row_marginal: Array1<f64>, col_marginal: Array1<f64>) -> Self {
        let coupling = Array2::from_shape_fn((row_marginal.len(), col_marginal.len()), |(i, j)| {
            row_marginal[i] * col_marginal[j]
        });
        Self { coupling, row_marginal, col_marginal }
    }

    /// `<T, C>`.
    pub fn cost(&self, cost: &Array2<f64>) -> f64 {
        self.coupling.iter().zip(cost.iter()).map(|(t, c)| t * c).sum()
    }

    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn max_marginal_violation(&self) -> f64 {
        let rows = self.coupling.sum_axis(Axis(1));
        let cols = self.coupling.sum_axis(Axis(0));
        rows.iter()
            .zip(self.row_marginal.iter())
            .chain(cols.iter().zip(self.col_marginal.iter()))
            .map(|(s, m)| (s - m).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    pub fn transposed(&self) -> Self {
        Self {
            coupling: self.coupling.t().to_owned(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
        }
    }
}

/// Distance plus solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct OtResult {
    pub distance: f64,
    pub plan: TransportPlan,
    pub iterations: usize,
    pub converged: bool,
}

impl OtResult {
    pub(crate) fn transposed(self) -> Self {
        Self { plan: self.plan.transposed(), ..self }
    }
}

/// Parameters shared by every solver call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Entropic regularization, relative to the largest cost entry.
    pub epsilon: f64,
    /// Sinkhorn iteration cap.
    pub max_iter: usize,
    /// Sinkhorn stops once the L1 marginal violation drops below this.
    pub tol: f64,
    /// Outer linearization steps of the Gromov-Wasserstein solver.
    pub gw_outer_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, max_iter: 1000, tol: 1e-6, gw_outer_iter: 50 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

pub(crate) fn check_marginal(name: &str, m: &Array1<f64>) -> Result<()> {
    if m.is_empty() {
        return Err(Error::invalid(format!("{name} marginal is empty")));
    }
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{name} marginal has a negative or non-finite entry")));
    }
    let s = m.sum();
    if (s - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(Error::invalid(format!("{name} marginal sums to {s}, expected 1")));
    }
    Ok(())
}
