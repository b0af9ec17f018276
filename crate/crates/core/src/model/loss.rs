//! Loss functions evaluated outside the tape.

use crate::error::{Error, Result};
use crate::numcore::logistic_loss;

/// Pairwise logistic ranking loss over a batch; pairs tied in truth add nothing.
pub fn ranking_loss(scores: &[f64], truths: &[f64]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::shape("ranking_loss", &[&[scores.len()], &[truths.len()]]));
    }
    if scores.len() < 2 {
        return Err(Error::invalid("ranking loss needs a batch of at least two"));
    }
    let mut total = 0.0;
    for m in 0..scores.len() {
        for n in m + 1..scores.len() {
            let sign = if truths[m] > truths[n] {
                1.0
            } else if truths[m] < truths[n] {
                -1.0
            } else {
                continue;
            };
            total += logistic_loss((scores[m] - scores[n]) * sign);
        }
    }
    Ok(total)
}

/// Mean cross-entropy of tier probabilities against labels, plus `λ · L₁`.
pub fn total_loss(probs: &[Vec<f64>], labels: &[usize], ranking: f64, lambda: f64) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut ce = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::invalid(format!(
                "label {l} out of range for {} tiers",
                p.len()
            )));
        }
        ce -= p[l].max(f64::MIN_POSITIVE).ln();
    }
    Ok(ce / labels.len() as f64 + lambda * ranking)
}
