//! Exhaustive assignment oracle.
//!
//! With `n` nodes on each side and uniform masses `1/n`, the transport polytope
//! is the Birkhoff polytope scaled by `1/n`, whose vertices are permutation
//! matrices. Minimizing a linear cost over it therefore reduces to the best
//! permutation, which enumeration finds exactly.

use super::CostMatrix;
use crate::error::{Error, Result};
use crate::graph::TaskGraph;

/// Largest node count the oracle accepts (8! = 40320 permutations).
pub const MAX_ORACLE_NODES: usize = 8;

/// `(1/n) min_sigma sum_i c_{i, sigma(i)}` by enumeration.
pub fn exact_assignment_cost(cost: &CostMatrix) -> Result<f64> {
    let n = cost.row_count();
    if cost.col_count() != n {
        return Err(Error::invalid("oracle needs a square cost matrix"));
    }
    if n > MAX_ORACLE_NODES {
        return Err(Error::invalid(format!("oracle refuses {n} nodes (limit {MAX_ORACLE_NODES})")));
    }
    let c = cost.entries();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>();
    let mut best = eval(&perm);
    // Heap's algorithm, iterative form.
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// Exact Wasserstein distance between two equal-size graphs.
pub fn exact_wd_oracle(a: &TaskGraph, b: &TaskGraph) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "oracle needs equal node counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    exact_assignment_cost(&CostMatrix::euclidean(a.nodes(), b.nodes())?)
}
