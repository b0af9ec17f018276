use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::histogram::{build_histogram, kl_divergence, BatchHistogram};
use crate::encoding::Family;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Per-tier state: running-mean embedding, per-batch property histograms
/// and cumulative operation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierBucket {
    pub tier: usize,
    pub embedding: Tensor,
    pub count: u64,
    pub flops_log: Vec<BatchHistogram>,
    pub params_log: Vec<BatchHistogram>,
    pub op_counts: BTreeMap<u8, u64>,
}

impl TierBucket {
    /// Zero embedding of shape `[channels, d_model]`.
    pub fn new(tier: usize, channels: usize, d_model: usize) -> Self {
        TierBucket {
            tier,
            embedding: Tensor::zeros(&[channels, d_model]),
            count: 0,
            flops_log: Vec::new(),
            params_log: Vec::new(),
            op_counts: BTreeMap::new(),
        }
    }

    /// Folds `features` into the running mean:
    /// `e ← (e · count + Σ features) / (count + |features|)`.
    pub fn update_embedding(&mut self, features: &[Tensor]) -> Result<()> {
        if features.is_empty() {
            return Ok(());
        }
        let mut sum = vec![0.0; self.embedding.len()];
        for f in features {
            if f.shape() != self.embedding.shape() {
                return Err(Error::shape("tier embedding", &[f.shape(), self.embedding.shape()]));
            }
            for (s, v) in sum.iter_mut().zip(f.data()) {
                *s += v;
            }
        }
        let old = self.count as f64;
        let new = old + features.len() as f64;
        for (e, s) in self.embedding.data_mut().iter_mut().zip(sum) {
            *e = (*e * old + s) / new;
        }
        self.count += features.len() as u64;
        Ok(())
    }

    /// Adds operation codes to the cumulative counts.
    pub fn update_op_counts(&mut self, family: Family, ops: &[u8]) -> Result<()> {
        let valid = |o: u8| match family {
            Family::Fixed4 => o <= 4,
            _ => (1..=5).contains(&o),
        };
        if let Some(bad) = ops.iter().find(|&&o| !valid(o)) {
            return Err(Error::invalid(format!(
                "op code {bad} unknown for family {family:?}"
            )));
        }
        for &o in ops {
            *self.op_counts.entry(o).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Appends this batch's FLOPs and #params histograms.
    pub fn record_batch(&mut self, flops: &[f64], params: &[f64], k: usize, q: usize) -> Result<()> {
        if flops.is_empty() {
            return Ok(());
        }
        self.flops_log.push(build_histogram(flops, k, q)?);
        self.params_log.push(build_histogram(params, k, q)?);
        Ok(())
    }

    /// Categorical distribution over `codes` with additive-one smoothing.
    pub fn op_distribution(&self, codes: &[u8]) -> Vec<f64> {
        let raw: Vec<f64> = codes
            .iter()
            .map(|c| self.op_counts.get(c).copied().unwrap_or(0) as f64 + 1.0)
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Which property a histogram describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Flops,
    Params,
}

/// Thresholds of the distribution-selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRule {
    /// Minimum tier-1 population as a fraction of the batch size.
    pub theta: f64,
    /// KL threshold in nats below which tier 1 is considered indistinct.
    pub zeta: f64,
    /// First (1-based) tier compared against tier 1.
    pub beta: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            theta: 0.1,
            zeta: 2.5,
            beta: 4,
        }
    }
}

/// Outcome of distribution selection for one property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Sample a bin by mass; the constraint is the bin's upper edge.
    Full(BatchHistogram),
    /// Sample uniformly on tier 1's interval.
    IntervalOnly { lo: f64, hi: f64 },
}

/// Keeps tier 1's full histogram only if it is well populated and differs
/// (KL ≥ ζ) from every tier from `β` down; otherwise keeps its interval.
///
/// `tiers[i]` is tier `i + 1`'s histogram for the batch being used; a
/// missing entry for a compared tier counts as a failed comparison.
pub fn select_distribution(
    tiers: &[Option<&BatchHistogram>],
    k: usize,
    rule: &SelectionRule,
) -> Result<Selection> {
    if rule.beta < 2 {
        return Err(Error::invalid(format!("tier index β must exceed 1, got {}", rule.beta)));
    }
    let top = tiers
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::invalid("tier 1 has no histogram"))?;
    let interval = Selection::IntervalOnly {
        lo: top.tau_min,
        hi: top.tau_max,
    };
    for i in rule.beta..=tiers.len() {
        let Some(other) = tiers[i - 1] else {
            return Ok(interval);
        };
        let sparse = (top.members as f64) < rule.theta * k as f64;
        if sparse || kl_divergence(top, other) < rule.zeta {
            return Ok(interval);
        }
    }
    Ok(Selection::Full(top.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_examples() {
        let mut b = TierBucket::new(0, 2, 3);
        b.embedding = Tensor::full(&[2, 3], 2.0);
        b.count = 1;
        b.update_embedding(&[Tensor::full(&[2, 3], 4.0)]).unwrap();
        assert!(b.embedding.data().iter().all(|&v| v == 3.0));
        assert_eq!(b.count, 2);

        let before = b.clone();
        b.update_embedding(&[]).unwrap();
        assert_eq!(b, before);

        let mut b = TierBucket::new(0, 1, 1);
        b.embedding = Tensor::full(&[1, 1], 1.0);
        b.count = 3;
        b.update_embedding(&[Tensor::full(&[1, 1], 4.0), Tensor::full(&[1, 1], 4.0)])
            .unwrap();
        assert!((b.embedding.data()[0] - 2.2).abs() < 1e-15);
        assert!(b.update_embedding(&[Tensor::zeros(&[2, 2])]).is_err());
    }

    #[test]
    fn op_counting() {
        let mut b = TierBucket::new(0, 1, 1);
        b.update_op_counts(Family::Dag7, &[]).unwrap();
        assert!(b.op_counts.is_empty());
        b.update_op_counts(Family::Dag7, &[2, 2, 3]).unwrap();
        assert_eq!(b.op_counts[&2], 2);
        assert_eq!(b.op_counts[&3], 1);
        assert!(b.update_op_counts(Family::Dag7, &[0]).is_err());
        assert!(b.update_op_counts(Family::Fixed4, &[5]).is_err());
        let p = b.op_distribution(&[2, 3, 4]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p, vec![0.5, 1.0 / 3.0, 1.0 / 6.0]);
    }

    fn hist(values: &[f64], k: usize) -> BatchHistogram {
        build_histogram(values, k, 10).unwrap()
    }

    #[test]
    fn sparse_tier_one_falls_back_to_interval() {
        let t1 = hist(&[10.0, 12.0, 14.0, 16.0, 18.0], 256);
        let far = hist(&[500.0, 600.0], 256);
        let tiers = [Some(&t1), Some(&far), Some(&far), Some(&far), Some(&far)];
        let s = select_distribution(&tiers, 256, &SelectionRule::default()).unwrap();
        assert_eq!(s, Selection::IntervalOnly { lo: 10.0, hi: 20.0 });
    }

    #[test]
    fn similar_tiers_fall_back_to_interval() {
        let vals: Vec<f64> = (0..30).map(|i| i as f64 * 3.0).collect();
        let t1 = hist(&vals, 100);
        let far = hist(&[900.0, 950.0], 100);
        let tiers = [Some(&t1), Some(&far), Some(&far), Some(&t1), Some(&far)];
        assert_eq!(kl_divergence(&t1, &t1), 0.0);
        let s = select_distribution(&tiers, 100, &SelectionRule::default()).unwrap();
        assert!(matches!(s, Selection::IntervalOnly { .. }));
    }

    #[test]
    fn distinct_tiers_keep_full_distribution() {
        let vals: Vec<f64> = (0..30).map(|i| i as f64 * 3.0).collect();
        let t1 = hist(&vals, 100);
        let far = hist(&[900.0, 950.0], 100);
        let tiers = [Some(&t1), None, None, Some(&far), Some(&far)];
        let s = select_distribution(&tiers, 100, &SelectionRule::default()).unwrap();
        assert_eq!(s, Selection::Full(t1.clone()));
        // a missing compared tier counts as failing
        let tiers = [Some(&t1), None, None, Some(&far), None];
        let s = select_distribution(&tiers, 100, &SelectionRule::default()).unwrap();
        assert!(matches!(s, Selection::IntervalOnly { .. }));
        let bad = SelectionRule {
            beta: 1,
            ..Default::default()
        };
        assert!(select_distribution(&tiers, 100, &bad).is_err());
    }
}
