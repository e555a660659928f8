use std::cmp::Ordering;

use super::{gromov_wasserstein, sinkhorn, uniform, CostMatrix, OtResult, SolverConfig};
use crate::error::{Error, Result};
use crate::graph::TaskGraph;

/// Whether `(a, b)` should be solved as `(b, a)`.
///
/// Both distances are symmetric in their arguments; solving in one fixed order
/// makes the computed values symmetric bit for bit.
pub(crate) fn canonical_swap(a: &TaskGraph, b: &TaskGraph) -> bool {
    let ord = a.len().cmp(&b.len()).then(a.dim().cmp(&b.dim())).then_with(|| {
        a.nodes()
            .iter()
            .zip(b.nodes().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    ord == Ordering::Greater
}

/// Wasserstein distance between the node sets of two graphs:
/// `min_T sum_ij T_ij ||z_a^i - z_b^j||` with uniform node masses.
pub fn wasserstein(a: &TaskGraph, b: &TaskGraph, cfg: &SolverConfig) -> Result<OtResult> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("graphs must have at least one node"));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if canonical_swap(a, b) {
        return wasserstein(b, a, cfg).map(OtResult::transposed);
    }
    let cost = CostMatrix::euclidean(a.nodes(), b.nodes())?;
    sinkhorn(&cost, &uniform(a.len()), &uniform(b.len()), cfg.epsilon, cfg.max_iter, cfg.tol)
}

/// Both terms of the mixed loss. A term with zero weight is not computed.
#[derive(Clone, Debug)]
pub struct OtLossParts {
    pub value: f64,
    pub wasserstein: Option<OtResult>,
    pub gromov: Option<OtResult>,
}

impl OtLossParts {
    pub fn converged(&self) -> bool {
        self.wasserstein.iter().chain(&self.gromov).all(|r| r.converged)
    }
}

pub fn ot_loss_parts(a: &TaskGraph, b: &TaskGraph, r: f64, cfg: &SolverConfig) -> Result<OtLossParts> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("mixing weight r must lie in [0, 1], got {r}")));
    }
    let w = if r > 0.0 { Some(wasserstein(a, b, cfg)?) } else { None };
    let gw = if r < 1.0 { Some(gromov_wasserstein(a, b, cfg)?) } else { None };
    let value = match (&w, &gw) {
        (Some(w), Some(gw)) => r * w.distance + (1.0 - r) * gw.distance,
        (Some(w), None) => w.distance,
        (None, Some(gw)) => gw.distance,
        (None, None) => unreachable!("r is either positive or below one"),
    };
    Ok(OtLossParts { value, wasserstein: w, gromov: gw })
}

/// `r * W(a, b) + (1 - r) * GW(a, b)`.
pub fn ot_loss(a: &TaskGraph, b: &TaskGraph, r: f64, cfg: &SolverConfig) -> Result<f64> {
    ot_loss_parts(a, b, r, cfg).map(|p| p.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use ndarray::{array, Array2};

    #[test]
    fn same_graph_is_zero() {
        let g = build_graph(&array![[0.0, 1.0], [2.0, 0.5], [1.0, 1.0]], 0).unwrap();
        let cfg = SolverConfig::default();
        assert!(wasserstein(&g, &g, &cfg).unwrap().distance <= 1e-6);
        for r in [0.0, 0.3, 1.0] {
            assert!(ot_loss(&g, &g, r, &cfg).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn single_nodes_three_four_five() {
        let a = build_graph(&array![[0.0, 0.0]], 0).unwrap();
        let b = build_graph(&array![[3.0, 4.0]], 1).unwrap();
        let cfg = SolverConfig::default();
        assert!((wasserstein(&a, &b, &cfg).unwrap().distance - 5.0).abs() < 1e-12);
        assert_eq!(gromov_wasserstein(&a, &b, &cfg).unwrap().distance, 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = build_graph(&array![[0.0, 0.0]], 0).unwrap();
        let b = build_graph(&array![[0.0, 0.0, 1.0]], 1).unwrap();
        assert!(matches!(wasserstein(&a, &b, &SolverConfig::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mixture_endpoints_are_exact() {
        let a = build_graph(&array![[0.0, 0.0], [1.0, 0.3], [0.2, 2.0]], 0).unwrap();
        let b = build_graph(&array![[0.5, 0.1], [1.5, 0.0], [0.0, 1.0]], 1).unwrap();
        let cfg = SolverConfig::default();
        let w = wasserstein(&a, &b, &cfg).unwrap().distance;
        let gw = gromov_wasserstein(&a, &b, &cfg).unwrap().distance;
        assert_eq!(ot_loss(&a, &b, 1.0, &cfg).unwrap(), w);
        assert_eq!(ot_loss(&a, &b, 0.0, &cfg).unwrap(), gw);
        assert!(ot_loss(&a, &b, 1.5, &cfg).is_err());
    }

    #[test]
    fn transposed_plan_orientation() {
        let a = build_graph(&array![[5.0, 0.0], [1.0, 0.0]], 0).unwrap();
        let b = build_graph(&Array2::from_elem((3, 2), 0.5), 1).unwrap();
        let cfg = SolverConfig::default();
        let ab = wasserstein(&a, &b, &cfg).unwrap();
        let ba = wasserstein(&b, &a, &cfg).unwrap();
        assert_eq!(ab.plan.coupling.dim(), (2, 3));
        assert_eq!(ba.plan.coupling.dim(), (3, 2));
        assert_eq!(ab.distance, ba.distance);
    }
}
