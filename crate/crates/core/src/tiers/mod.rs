//! Tier buckets: running-mean embeddings, per-batch FLOPs/#params
//! histograms, operation counts, and KL-gated distribution selection.

mod bucket;
mod histogram;

pub use bucket::{select_distribution, Property, Selection, SelectionRule, TierBucket};
pub use histogram::{build_histogram, kl_divergence, BatchHistogram, DEFAULT_BINS, KL_SMOOTHING};

/// Fresh buckets for `tiers` tiers with `[channels, d_model]` embeddings.
pub fn new_buckets(tiers: usize, channels: usize, d_model: usize) -> Vec<TierBucket> {
    (0..tiers)
        .map(|t| TierBucket::new(t, channels, d_model))
        .collect()
}
