use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::bench_data::CellStructure;
use crate::encoding::ops;
use crate::error::{Error, Result};
use crate::tiers::Selection;

/// Draws one upper bound from a selected distribution: a bin picked by mass
/// (bound = its upper edge), or a uniform value on the interval.
pub fn sample_constraint<R: Rng + ?Sized>(selection: &Selection, rng: &mut R) -> Result<f64> {
    match selection {
        Selection::Full(h) => {
            let pick = WeightedIndex::new(&h.masses)
                .map_err(|e| Error::invalid(format!("histogram masses: {e}")))?
                .sample(rng);
            Ok(h.upper_edge(pick))
        }
        Selection::IntervalOnly { lo, hi } => {
            if hi > lo {
                Ok(rng.gen_range(*lo..=*hi))
            } else {
                Ok(*lo)
            }
        }
    }
}

fn categorical(op_dist: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(op_dist).map_err(|e| Error::invalid(format!("op distribution: {e}")))
}

/// Node-wise cell sampler for node-operation families.
///
/// Every node after the input attaches to one uniformly chosen earlier
/// node and (if internal) draws its op from `op_dist` over
/// `ops::INTERNAL`; the output node is last. Then `max_edges - (nodes - 1)`
/// extra forward edges are drawn between distinct pairs, duplicates dropped.
pub fn sample_cell_dag<R: Rng + ?Sized>(
    nodes: usize,
    max_edges: usize,
    op_dist: &[f64],
    rng: &mut R,
) -> Result<CellStructure> {
    if nodes < 2 || max_edges + 1 < nodes {
        return Err(Error::invalid(format!(
            "cannot build a {nodes}-node cell with at most {max_edges} edges"
        )));
    }
    if op_dist.len() != ops::INTERNAL.len() {
        return Err(Error::invalid(format!(
            "op distribution has {} entries, expected {}",
            op_dist.len(),
            ops::INTERNAL.len()
        )));
    }
    let pick_op = categorical(op_dist)?;
    let mut adjacency = vec![vec![0u8; nodes]; nodes];
    let mut node_ops = vec![ops::INPUT; nodes];
    for j in 1..nodes {
        adjacency[rng.gen_range(0..j)][j] = 1;
        node_ops[j] = if j == nodes - 1 {
            ops::OUTPUT
        } else {
            ops::INTERNAL[pick_op.sample(rng)]
        };
    }
    for _ in 0..max_edges - (nodes - 1) {
        let a = rng.gen_range(0..nodes);
        let mut b = rng.gen_range(0..nodes - 1);
        if b >= a {
            b += 1;
        }
        adjacency[a.min(b)][a.max(b)] = 1;
    }
    Ok(CellStructure {
        adjacency,
        ops: node_ops,
    })
}

/// Seven-node, nine-edge sampler of the 101-style family.
pub fn sample_cell_dag7<R: Rng + ?Sized>(op_dist: &[f64], rng: &mut R) -> Result<CellStructure> {
    sample_cell_dag(7, 9, op_dist, rng)
}

/// Fixed complete 4-node topology with six independently drawn edge ops
/// from `op_dist` over `ops::EDGE`.
pub fn sample_cell_fixed4<R: Rng + ?Sized>(op_dist: &[f64], rng: &mut R) -> Result<CellStructure> {
    if op_dist.len() != ops::EDGE.len() {
        return Err(Error::invalid(format!(
            "op distribution has {} entries, expected {}",
            op_dist.len(),
            ops::EDGE.len()
        )));
    }
    let pick_op = categorical(op_dist)?;
    let adjacency = (0..4)
        .map(|i| (0..4).map(|j| u8::from(j > i)).collect())
        .collect();
    Ok(CellStructure {
        adjacency,
        ops: (0..6).map(|_| ops::EDGE[pick_op.sample(rng)]).collect(),
    })
}
