use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kendall τ-a over pairs with distinct truths. Pairs tied in score count
/// toward the denominator but are neither concordant nor discordant.
pub fn kendall_tau(scores: &[f64], truths: &[f64]) -> Result<f64> {
    if scores.len() != truths.len() || scores.len() < 2 {
        return Err(Error::invalid(format!(
            "kendall tau needs two equal-length series of at least 2, got {} and {}",
            scores.len(),
            truths.len()
        )));
    }
    let (mut net, mut counted) = (0i64, 0u64);
    for m in 0..scores.len() {
        for n in m + 1..scores.len() {
            let t = truths[m] - truths[n];
            if t == 0.0 {
                continue;
            }
            counted += 1;
            let s = scores[m] - scores[n];
            if s != 0.0 {
                net += if (s > 0.0) == (t > 0.0) { 1 } else { -1 };
            }
        }
    }
    if counted == 0 {
        return Err(Error::invalid("kendall tau undefined: every truth is tied"));
    }
    Ok(net as f64 / counted as f64)
}

/// Held-out quality of a trained ranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub kendall_tau: f64,
    pub tier_accuracy: f64,
    pub adjacent_tier_accuracy: f64,
}

/// Compares predicted tiers against reference labels.
pub fn tier_agreement(predicted: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::invalid("tier agreement needs equal nonempty label lists"));
    }
    let n = predicted.len() as f64;
    let exact = predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;
    let adjacent = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.abs_diff(**l) <= 1)
        .count() as f64;
    Ok((exact / n, adjacent / n))
}
