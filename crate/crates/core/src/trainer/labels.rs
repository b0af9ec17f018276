use crate::error::{Error, Result};

/// Quintile-style tier labels for one batch.
///
/// Samples are ordered by accuracy (descending, ties by id) and cut into
/// `tiers` contiguous groups; the first `len % tiers` groups get one extra
/// member. Returns the 0-based tier of each input position.
pub fn build_labels(accuracies: &[f64], ids: &[&str], tiers: usize) -> Result<Vec<usize>> {
    if accuracies.len() != ids.len() {
        return Err(Error::invalid(format!(
            "{} accuracies for {} ids",
            accuracies.len(),
            ids.len()
        )));
    }
    if tiers == 0 || accuracies.len() < tiers {
        return Err(Error::invalid(format!(
            "batch of {} cannot fill {} tiers",
            accuracies.len(),
            tiers
        )));
    }
    let mut order: Vec<usize> = (0..accuracies.len()).collect();
    order.sort_by(|&a, &b| {
        accuracies[b]
            .total_cmp(&accuracies[a])
            .then_with(|| ids[a].cmp(ids[b]))
    });
    let sizes = tier_sizes(accuracies.len(), tiers);
    let mut labels = vec![0; accuracies.len()];
    let mut pos = 0;
    for (tier, &size) in sizes.iter().enumerate() {
        for &idx in &order[pos..pos + size] {
            labels[idx] = tier;
        }
        pos += size;
    }
    Ok(labels)
}

/// Group sizes for `n` items in `tiers` groups, remainder to the first groups.
pub fn tier_sizes(n: usize, tiers: usize) -> Vec<usize> {
    let (base, rem) = (n / tiers, n % tiers);
    (0..tiers).map(|t| base + usize::from(t < rem)).collect()
}
