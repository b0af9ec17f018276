use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of the space used for training.
    pub train_fraction: f64,
    /// Exact training size; overrides `train_fraction` when set.
    pub train_count: Option<usize>,
    /// Held-out validation records, disjoint from training.
    pub validation: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.01,
            train_count: None,
            validation: 1024,
        }
    }
}

/// Disjoint index sets into a record list.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded random split. Training size is `train_count` or
/// `ceil(fraction * n)`; the validation slice is truncated if the space
/// runs out.
pub fn split_indices(n: usize, config: &SplitConfig, seed: u64) -> Result<Split> {
    let train_n = match config.train_count {
        Some(c) => c.min(n),
        None if config.train_fraction > 0.0 && config.train_fraction <= 1.0 => {
            ((config.train_fraction * n as f64).ceil() as usize).min(n)
        }
        None => {
            return Err(Error::invalid(format!(
                "train_fraction must lie in (0, 1], got {}",
                config.train_fraction
            )))
        }
    };
    if train_n == 0 {
        return Err(Error::invalid("empty training split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_n = config.validation.min(n - train_n);
    Ok(Split {
        train: order[..train_n].to_vec(),
        validation: order[train_n..train_n + val_n].to_vec(),
    })
}
