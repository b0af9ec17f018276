//! Desk-scale enumerable cell space with an analytic accuracy oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::space::RecordSpace;
use crate::encoding::{ops, Accuracy, ArchitectureRecord, CellStats, EncodingLayout, Family};
use crate::error::{Error, Result};

/// Largest space `generate_synthetic` will build.
pub const STRUCTURE_BUDGET: u64 = 50_000;

/// Amplitude of the per-structure oracle noise (in logit units).
pub const ORACLE_NOISE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Maximum nodes per cell, input and output included.
    pub nodes: usize,
    pub max_edges: usize,
    pub cells: usize,
    pub seed: u64,
    /// Seed of the oracle noise; defaults to `seed`.
    pub noise_seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 6,
            max_edges: 7,
            cells: 3,
            seed: 0,
            noise_seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn layout(&self) -> EncodingLayout {
        EncodingLayout::synth(self.nodes, self.cells)
    }
}

/// Hidden structural weights of the oracle, fixed per seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleWeights {
    pub bias: f64,
    /// Weights on the fraction of internal nodes using conv1x1, conv3x3, pooling.
    pub op_mix: [f64; 3],
    pub path: f64,
    pub flops: f64,
    pub flops_saturation: f64,
    pub params: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpace {
    pub spec: SyntheticSpec,
    pub weights: OracleWeights,
    space: RecordSpace,
}

impl SyntheticSpace {
    pub fn space(&self) -> &RecordSpace {
        &self.space
    }

    pub fn into_space(self) -> RecordSpace {
        self.space
    }
}

/// Valid edge sets of a `v`-node cell with at most `max_edges` edges, in
/// increasing bitmask order over row-major upper-triangular pairs.
fn edge_sets(v: usize, max_edges: usize) -> Vec<Vec<Vec<u8>>> {
    let pairs: Vec<(usize, usize)> = (0..v)
        .flat_map(|i| (i + 1..v).map(move |j| (i, j)))
        .collect();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << pairs.len()) {
        if mask.count_ones() as usize > max_edges {
            continue;
        }
        let mut has_pred = vec![false; v];
        let mut has_succ = vec![false; v];
        for (b, &(i, j)) in pairs.iter().enumerate() {
            if mask & (1 << b) != 0 {
                has_succ[i] = true;
                has_pred[j] = true;
            }
        }
        let valid = (1..v).all(|j| has_pred[j]) && (0..v - 1).all(|i| has_succ[i]);
        if !valid {
            continue;
        }
        let mut adj = vec![vec![0u8; v]; v];
        for (b, &(i, j)) in pairs.iter().enumerate() {
            if mask & (1 << b) != 0 {
                adj[i][j] = 1;
            }
        }
        out.push(adj);
    }
    out
}

/// Number of structures a spec enumerates.
pub fn count_structures(spec: &SyntheticSpec) -> Result<u64> {
    check_spec(spec)?;
    let k = ops::INTERNAL.len() as u64;
    Ok((2..=spec.nodes)
        .map(|v| edge_sets(v, spec.max_edges).len() as u64 * k.pow(v as u32 - 2))
        .sum())
}

fn check_spec(spec: &SyntheticSpec) -> Result<()> {
    if !(2..=7).contains(&spec.nodes) {
        return Err(Error::invalid(format!(
            "synthetic cells need 2..=7 nodes, got {}",
            spec.nodes
        )));
    }
    if spec.cells == 0 || spec.max_edges == 0 {
        return Err(Error::invalid("synthetic spec needs at least one cell and one edge"));
    }
    Ok(())
}

fn depths(adj: &[Vec<u8>]) -> Vec<usize> {
    let v = adj.len();
    let mut d = vec![0usize; v];
    for j in 1..v {
        d[j] = (0..j)
            .filter(|&i| adj[i][j] != 0)
            .map(|i| d[i] + 1)
            .max()
            .unwrap_or(0);
    }
    d
}

struct CostTable {
    flops: Vec<Vec<Vec<f64>>>,
    params: Vec<Vec<Vec<f64>>>,
}

impl CostTable {
    /// `[cell][op][depth]` costs; op index follows `ops::INTERNAL`.
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let base_flops = [18.0, 55.0, 4.0];
        let base_params = [6.0, 17.0, 0.0];
        let mut flops = Vec::with_capacity(spec.cells);
        let mut params = Vec::with_capacity(spec.cells);
        for c in 0..spec.cells {
            let fm: f64 = rng.gen_range(0.8..1.2);
            let pm = 2f64.powi(c as i32) * rng.gen_range(0.9..1.1);
            let mut fc = Vec::new();
            let mut pc = Vec::new();
            for o in 0..3 {
                let mut fd = Vec::new();
                let mut pd = Vec::new();
                for depth in 0..spec.nodes {
                    let grow = 1.0 + 0.25 * depth as f64;
                    fd.push(base_flops[o] * fm * grow * rng.gen_range(0.9..1.1));
                    pd.push(base_params[o] * pm * grow * rng.gen_range(0.9..1.1));
                }
                fc.push(fd);
                pc.push(pd);
            }
            flops.push(fc);
            params.push(pc);
        }
        CostTable { flops, params }
    }
}

fn op_index(code: u8) -> usize {
    ops::INTERNAL
        .iter()
        .position(|&c| c == code)
        .expect("internal op")
}

struct Features {
    mix: [f64; 3],
    path: f64,
}

fn structural_features(adj: &[Vec<u8>], node_ops: &[u8], max_nodes: usize) -> Features {
    let v = adj.len();
    let mut mix = [0.0; 3];
    if v > 2 {
        for &o in &node_ops[1..v - 1] {
            mix[op_index(o)] += 1.0 / (v - 2) as f64;
        }
    }
    Features {
        mix,
        path: depths(adj)[v - 1] as f64 / (max_nodes - 1) as f64,
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Enumerates every valid cell under the spec and attaches costs and
/// oracle accuracies. Deterministic for a given spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSpace> {
    let count = count_structures(spec)?;
    if count > STRUCTURE_BUDGET {
        return Err(Error::Budget {
            count,
            budget: STRUCTURE_BUDGET,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = CostTable::new(spec, &mut rng);
    let weights = OracleWeights {
        bias: 1.5,
        op_mix: [
            rng.gen_range(0.0..0.5),
            rng.gen_range(0.5..1.0),
            rng.gen_range(-1.0..-0.5),
        ],
        path: rng.gen_range(0.5..1.0),
        flops: rng.gen_range(0.6..1.0),
        flops_saturation: rng.gen_range(0.1..0.2),
        params: rng.gen_range(-0.3..0.3),
    };

    let mut records = Vec::with_capacity(count as usize);
    let mut feats = Vec::with_capacity(count as usize);
    for v in 2..=spec.nodes {
        let internal = v - 2;
        for adj in edge_sets(v, spec.max_edges) {
            let depth = depths(&adj);
            for combo in 0..3usize.pow(internal as u32) {
                let mut node_ops = vec![ops::INPUT; v];
                node_ops[v - 1] = ops::OUTPUT;
                let mut rest = combo;
                for slot in (1..v - 1).rev() {
                    node_ops[slot] = ops::INTERNAL[rest % 3];
                    rest /= 3;
                }
                let cells: Vec<CellStats> = (0..spec.cells)
                    .map(|c| {
                        let cost = |t: &Vec<Vec<Vec<f64>>>| -> Vec<f64> {
                            (0..v)
                                .map(|n| {
                                    if n == 0 || n == v - 1 {
                                        0.0
                                    } else {
                                        t[c][op_index(node_ops[n])][depth[n]]
                                    }
                                })
                                .collect()
                        };
                        CellStats {
                            flops: cost(&table.flops),
                            params: cost(&table.params),
                        }
                    })
                    .collect();
                let total_flops = cells.iter().flat_map(|c| &c.flops).sum();
                let total_params = cells.iter().flat_map(|c| &c.params).sum();
                feats.push(structural_features(&adj, &node_ops, spec.nodes));
                records.push(ArchitectureRecord {
                    id: format!("syn-{:05}", records.len()),
                    family: Family::Synth,
                    adjacency: adj.clone(),
                    node_ops,
                    edge_ops: Vec::new(),
                    cells,
                    total_flops,
                    total_params,
                    accuracy: None,
                });
            }
        }
    }

    let zscore = |vals: Vec<f64>| -> Vec<f64> {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        vals.iter().map(|x| (x - mean) / sd.max(1e-12)).collect()
    };
    let fz = zscore(records.iter().map(|r| r.total_flops).collect());
    let pz = zscore(records.iter().map(|r| r.total_params).collect());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed.unwrap_or(spec.seed) ^ 0x6e6f697365);
    for (i, r) in records.iter_mut().enumerate() {
        let f = &feats[i];
        let w = &weights;
        let logit = w.bias
            + f.mix.iter().zip(&w.op_mix).map(|(a, b)| a * b).sum::<f64>()
            + w.path * f.path
            + w.flops * fz[i]
            - w.flops_saturation * fz[i] * fz[i]
            + w.params * pz[i]
            + noise_rng.gen_range(-ORACLE_NOISE..=ORACLE_NOISE);
        let acc = logistic(logit);
        r.accuracy = Some(Accuracy {
            validation: acc,
            test: acc,
        });
    }
    let space = RecordSpace::new(spec.layout(), records)?;
    Ok(SyntheticSpace {
        spec: spec.clone(),
        weights,
        space,
    })
}
