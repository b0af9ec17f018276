use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoding::{ops, structure_key, ArchitectureRecord, EncodingLayout, Family};
use crate::error::{Error, Result};

/// Source of ground-truth accuracy for a record id.
pub trait Oracle {
    fn query(&self, id: &str) -> Result<f64>;
}

/// A cell's structure before costs are attached: adjacency plus node ops
/// (node-operation families) or edge ops (fixed-topology family).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellStructure {
    pub adjacency: Vec<Vec<u8>>,
    pub ops: Vec<u8>,
}

impl CellStructure {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|r| r.iter().filter(|&&a| a != 0).count())
            .sum()
    }

    pub fn key(&self) -> String {
        structure_key(&self.adjacency, &self.ops)
    }

    /// Drops nodes that are not on some input→output path and re-indexes
    /// the rest. Only meaningful for node-operation cells.
    pub fn pruned(&self) -> CellStructure {
        let v = self.num_nodes();
        if v == 0 {
            return self.clone();
        }
        let mut from_in = vec![false; v];
        from_in[0] = true;
        for j in 1..v {
            from_in[j] = (0..j).any(|i| from_in[i] && self.adjacency[i][j] != 0);
        }
        let mut to_out = vec![false; v];
        to_out[v - 1] = true;
        for i in (0..v - 1).rev() {
            to_out[i] = (i + 1..v).any(|j| to_out[j] && self.adjacency[i][j] != 0);
        }
        let keep: Vec<usize> = (0..v).filter(|&i| from_in[i] && to_out[i]).collect();
        if keep.len() == v {
            return self.clone();
        }
        let adjacency = keep
            .iter()
            .map(|&i| keep.iter().map(|&j| self.adjacency[i][j]).collect())
            .collect();
        CellStructure {
            adjacency,
            ops: keep.iter().map(|&i| self.ops[i]).collect(),
        }
    }
}

/// Position of an architecture in its space by oracle accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueRank {
    /// 1 is best.
    pub rank: usize,
    pub permille: f64,
}

/// An enumerated set of records addressable by id and by structure.
#[derive(Clone, Debug)]
pub struct RecordSpace {
    layout: EncodingLayout,
    records: Vec<ArchitectureRecord>,
    by_id: HashMap<String, usize>,
    by_key: HashMap<String, usize>,
    ranks: Vec<usize>,
}

impl RecordSpace {
    /// Builds the lookup tables. Every record must carry an accuracy so
    /// that true ranks are defined.
    pub fn new(layout: EncodingLayout, records: Vec<ArchitectureRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut by_key = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(layout.resolution, layout.cells)?;
            if r.family != layout.family {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: format!("family {:?} in a {:?} space", r.family, layout.family),
                });
            }
            if r.accuracy.is_none() {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: "missing accuracy".into(),
                });
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            by_key.entry(r.structure_key()).or_insert(i);
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            rb.test_accuracy()
                .partial_cmp(&ra.test_accuracy())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ra.id.cmp(&rb.id))
        });
        let mut ranks = vec![0; records.len()];
        for (pos, &idx) in order.iter().enumerate() {
            ranks[idx] = pos + 1;
        }
        Ok(RecordSpace {
            layout,
            records,
            by_id,
            by_key,
            ranks,
        })
    }

    pub fn layout(&self) -> &EncodingLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ArchitectureRecord] {
        &self.records
    }

    pub fn get(&self, idx: usize) -> &ArchitectureRecord {
        &self.records[idx]
    }

    pub fn by_id(&self, id: &str) -> Option<&ArchitectureRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Concrete record for a sampled structure, pruning dead nodes first for
    /// node-operation families.
    pub fn resolve(&self, cell: &CellStructure) -> Option<&ArchitectureRecord> {
        let key = match self.layout.family {
            Family::Fixed4 => cell.key(),
            _ => cell.pruned().key(),
        };
        self.by_key.get(&key).map(|&i| &self.records[i])
    }

    pub fn true_rank(&self, id: &str) -> Result<TrueRank> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let rank = self.ranks[idx];
        Ok(TrueRank {
            rank,
            permille: 1000.0 * rank as f64 / self.records.len() as f64,
        })
    }

    /// Id of the rank-1 record.
    pub fn best_id(&self) -> Option<&str> {
        self.ranks
            .iter()
            .position(|&r| r == 1)
            .map(|i| self.records[i].id.as_str())
    }

    /// Internal operation codes a sampler may choose from.
    pub fn sample_codes(&self) -> &'static [u8] {
        match self.layout.family {
            Family::Fixed4 => &ops::EDGE,
            _ => &ops::INTERNAL,
        }
    }
}

impl Oracle for RecordSpace {
    fn query(&self, id: &str) -> Result<f64> {
        self.by_id(id)
            .and_then(|r| r.test_accuracy())
            .ok_or_else(|| Error::Oracle {
                id: id.to_string(),
                reason: "no such record".into(),
            })
    }
}
