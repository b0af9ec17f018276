use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Search-space family a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    /// Up to 7 operation nodes, 9 cells, at most 9 edges.
    Dag7,
    /// Fixed 4-node complete DAG with operations on the 6 edges, 15 cells.
    Fixed4,
    /// Desk-scale synthetic space; node-operation cells like `Dag7`.
    Synth,
}

pub mod ops {
    //! Operation codes of node-operation families.
    pub const INPUT: u8 = 1;
    pub const CONV1X1: u8 = 2;
    pub const CONV3X3: u8 = 3;
    pub const MAXPOOL3X3: u8 = 4;
    pub const OUTPUT: u8 = 5;

    /// Codes a sampler may place on internal nodes.
    pub const INTERNAL: [u8; 3] = [CONV1X1, CONV3X3, MAXPOOL3X3];

    /// Edge codes of the fixed-topology family.
    pub const EDGE: [u8; 5] = [0, 1, 2, 3, 4];
}

/// Per-node FLOPs (MFLOPs) and parameter counts (thousands) of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellStats {
    pub flops: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accuracy {
    pub validation: f64,
    pub test: f64,
}

/// One architecture: cell DAG, operations, per-cell cost vectors and accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureRecord {
    pub id: String,
    pub family: Family,
    /// `adjacency[i][j] = 1` for an edge `i → j`; strictly upper-triangular.
    pub adjacency: Vec<Vec<u8>>,
    /// Operation code per node (node-operation families).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub node_ops: Vec<u8>,
    /// Operation code per edge in row-major upper-triangular order
    /// `(0,1), (0,2), (0,3), (1,2), (1,3), (2,3)` (fixed-topology family).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edge_ops: Vec<u8>,
    pub cells: Vec<CellStats>,
    pub total_flops: f64,
    pub total_params: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Accuracy>,
}

impl ArchitectureRecord {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|r| r.iter().filter(|&&v| v != 0).count())
            .sum()
    }

    /// Accuracy used for training labels (validation).
    pub fn train_accuracy(&self) -> Option<f64> {
        self.accuracy.map(|a| a.validation)
    }

    /// Accuracy the search oracle reports (test).
    pub fn test_accuracy(&self) -> Option<f64> {
        self.accuracy.map(|a| a.test)
    }

    /// Operations counted by tier statistics: node ops or edge ops by family.
    pub fn op_codes(&self) -> &[u8] {
        match self.family {
            Family::Fixed4 => &self.edge_ops,
            _ => &self.node_ops,
        }
    }

    /// Structure key: identical for records with the same adjacency and ops.
    pub fn structure_key(&self) -> String {
        structure_key(&self.adjacency, self.op_codes())
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Record {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks structural invariants. `max_nodes`/`num_cells` describe the
    /// layout the record will be encoded into.
    pub fn validate(&self, max_nodes: usize, num_cells: usize) -> Result<()> {
        let v = self.num_nodes();
        if v == 0 {
            return Err(self.fail("empty adjacency"));
        }
        if v > max_nodes {
            return Err(self.fail(format!("{v} nodes exceeds the limit of {max_nodes}")));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != v {
                return Err(self.fail(format!("adjacency row {i} has {} entries, expected {v}", row.len())));
            }
            for (j, &a) in row.iter().enumerate() {
                if a > 1 {
                    return Err(self.fail(format!("adjacency entry ({i},{j}) is {a}, not binary")));
                }
                if a == 1 && j <= i {
                    return Err(self.fail(format!("edge {i}->{j} is not strictly upper-triangular")));
                }
            }
        }
        match self.family {
            Family::Dag7 | Family::Synth => {
                if self.node_ops.len() != v {
                    return Err(self.fail(format!(
                        "node count mismatch: {v}-node adjacency but {} op codes",
                        self.node_ops.len()
                    )));
                }
                if !self.edge_ops.is_empty() {
                    return Err(self.fail("edge_ops given for a node-operation family"));
                }
                if let Some(bad) = self.node_ops.iter().find(|&&o| !(1..=5).contains(&o)) {
                    return Err(self.fail(format!("op code {bad} outside 1..=5")));
                }
                if self.family == Family::Dag7 && self.edge_count() > 9 {
                    return Err(self.fail(format!("{} edges exceeds 9", self.edge_count())));
                }
            }
            Family::Fixed4 => {
                if v != 4 {
                    return Err(self.fail(format!("fixed-topology cell needs 4 nodes, got {v}")));
                }
                for i in 0..4 {
                    for j in i + 1..4 {
                        if self.adjacency[i][j] != 1 {
                            return Err(self.fail(format!("missing fixed edge {i}->{j}")));
                        }
                    }
                }
                if self.edge_ops.len() != 6 {
                    return Err(self.fail(format!("expected 6 edge ops, got {}", self.edge_ops.len())));
                }
                if let Some(bad) = self.edge_ops.iter().find(|&&o| o > 4) {
                    return Err(self.fail(format!("edge op code {bad} outside 0..=4")));
                }
            }
        }
        if self.cells.len() != num_cells {
            return Err(self.fail(format!("expected {num_cells} cells, got {}", self.cells.len())));
        }
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.flops.len() != v || cell.params.len() != v {
                return Err(self.fail(format!(
                    "cell {c} vectors have lengths {}/{}, expected {v}",
                    cell.flops.len(),
                    cell.params.len()
                )));
            }
            let bad = cell
                .flops
                .iter()
                .chain(&cell.params)
                .any(|x| !x.is_finite() || *x < 0.0);
            if bad {
                return Err(self.fail(format!("cell {c} has negative or non-finite cost")));
            }
        }
        for (name, x) in [("total_flops", self.total_flops), ("total_params", self.total_params)] {
            if !x.is_finite() || x < 0.0 {
                return Err(self.fail(format!("{name} = {x} is not a nonnegative real")));
            }
        }
        if let Some(acc) = self.accuracy {
            for x in [acc.validation, acc.test] {
                if !(0.0..=1.0).contains(&x) {
                    return Err(self.fail(format!("accuracy {x} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Index of edge `(i, j)` in row-major upper-triangular order of a 4-node cell.
pub fn fixed4_edge_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < 4);
    match (i, j) {
        (0, 1) => 0,
        (0, 2) => 1,
        (0, 3) => 2,
        (1, 2) => 3,
        (1, 3) => 4,
        _ => 5,
    }
}

pub fn structure_key(adjacency: &[Vec<u8>], ops: &[u8]) -> String {
    let mut key = String::with_capacity(adjacency.len() * adjacency.len() + ops.len() + 4);
    key.push_str(&adjacency.len().to_string());
    key.push(':');
    for row in adjacency {
        for &a in row {
            key.push(if a != 0 { '1' } else { '0' });
        }
    }
    key.push(':');
    for &o in ops {
        key.push(char::from(b'0' + o));
    }
    key
}
