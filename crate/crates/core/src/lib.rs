//! Neural architecture ranker.
//!
//! A transformer predictor that sorts candidate cell architectures into
//! quality tiers and scores them, together with the tier statistics it
//! collects while training and the sampling loop that uses those
//! statistics to search without an RL controller or evolution.

pub mod bench_data;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod model;
pub mod numcore;
pub mod profile;
pub mod search;
pub mod tiers;
pub mod trainer;

pub use error::{Error, Result};
