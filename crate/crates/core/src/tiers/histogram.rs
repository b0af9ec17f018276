use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing mass added to every bin before a divergence is taken.
pub const KL_SMOOTHING: f64 = 1e-8;

/// Default number of bins per batch histogram.
pub const DEFAULT_BINS: usize = 10;

/// Distribution of one property (FLOPs or #params) over the members of a
/// tier within a single training batch.
///
/// Bins are `(τ_min + (κ-1)δ, τ_min + κδ]` for `κ = 1..q`, the first one
/// closed at `τ_min`. Masses are member counts divided by the batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchHistogram {
    pub tau_min: f64,
    /// Upper edge of the last bin (`τ_min + qδ`, or `τ_min` when degenerate).
    pub tau_max: f64,
    pub delta: u64,
    pub masses: Vec<f64>,
    pub members: usize,
    pub batch_size: usize,
}

impl BatchHistogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// All values were equal: a single zero-width bin at `τ_min`.
    pub fn is_degenerate(&self) -> bool {
        self.tau_max == self.tau_min
    }

    /// Upper edge `τ_κ` of bin `idx` (0-based).
    pub fn upper_edge(&self, idx: usize) -> f64 {
        if self.is_degenerate() {
            self.tau_min
        } else {
            self.tau_min + (idx as f64 + 1.0) * self.delta as f64
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Index of the bin containing `x`; values outside clamp to the ends.
    fn bin_of(tau_min: f64, delta: f64, bins: usize, x: f64) -> usize {
        if x <= tau_min {
            return 0;
        }
        let k = ((x - tau_min) / delta).ceil() as usize;
        k.clamp(1, bins) - 1
    }
}

/// Discretizes one tier's values from a batch of `k` architectures into `q` bins.
pub fn build_histogram(values: &[f64], k: usize, q: usize) -> Result<BatchHistogram> {
    if values.is_empty() {
        return Err(Error::invalid("histogram of no values"));
    }
    if k < values.len() {
        return Err(Error::invalid(format!(
            "batch size {k} smaller than {} members",
            values.len()
        )));
    }
    if q == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("histogram value {bad}")));
    }
    let tau_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let observed_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kf = k as f64;
    if observed_max == tau_min {
        return Ok(BatchHistogram {
            tau_min,
            tau_max: tau_min,
            delta: 1,
            masses: vec![values.len() as f64 / kf],
            members: values.len(),
            batch_size: k,
        });
    }
    let step = (observed_max - tau_min) / q as f64;
    let delta = (step.ceil() as u64).max(1);
    let mut counts = vec![0usize; q];
    for &x in values {
        counts[BatchHistogram::bin_of(tau_min, delta as f64, q, x)] += 1;
    }
    Ok(BatchHistogram {
        tau_min,
        tau_max: tau_min + (q as u64 * delta) as f64,
        delta,
        masses: counts.into_iter().map(|c| c as f64 / kf).collect(),
        members: values.len(),
        batch_size: k,
    })
}

/// Spreads `h` onto a grid starting at `lo` with step `delta` and `bins` bins,
/// assuming mass is uniform within each source bin.
fn rebin(h: &BatchHistogram, lo: f64, delta: f64, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins];
    if h.is_degenerate() {
        out[BatchHistogram::bin_of(lo, delta, bins, h.tau_min)] += h.total_mass();
        return out;
    }
    let width = h.delta as f64;
    for (i, &m) in h.masses.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let a = h.tau_min + i as f64 * width;
        let b = a + width;
        let first = (((a - lo) / delta).floor().max(0.0) as usize).min(bins - 1);
        for (t, slot) in out.iter_mut().enumerate().skip(first) {
            let ta = lo + t as f64 * delta;
            let tb = if t == bins - 1 { f64::INFINITY } else { ta + delta };
            if ta >= b {
                break;
            }
            let overlap = b.min(tb) - a.max(ta);
            if overlap > 0.0 {
                *slot += m * overlap / width;
            }
        }
    }
    out
}

fn smoothed(mut p: Vec<f64>) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    let n = p.len() as f64;
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    p.iter_mut().for_each(|v| *v += KL_SMOOTHING);
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// `KL(pa ‖ pb)` in nats after re-binning both onto their union interval
/// with the finer step, renormalizing and smoothing.
pub fn kl_divergence(pa: &BatchHistogram, pb: &BatchHistogram) -> f64 {
    let lo = pa.tau_min.min(pb.tau_min);
    let hi = pa.tau_max.max(pb.tau_max);
    let delta = pa.delta.min(pb.delta) as f64;
    let bins = (((hi - lo) / delta).ceil() as usize).max(1);
    let p = smoothed(rebin(pa, lo, delta, bins));
    let q = smoothed(rebin(pb, lo, delta, bins));
    p.iter()
        .zip(&q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}
