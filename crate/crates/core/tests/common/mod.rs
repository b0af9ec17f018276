#![allow(dead_code)]

use nar_core::model::ModelConfig;

/// A 1,312-structure synthetic space and a small ranker sized for it.
pub fn small_space() -> nar_core::bench_data::SyntheticSpace {
    nar_core::bench_data::generate_synthetic(&nar_core::bench_data::SyntheticSpec {
        nodes: 5,
        max_edges: 6,
        cells: 3,
        seed: 2,
        noise_seed: None,
    })
    .unwrap()
}

pub fn small_model_config(layout: &nar_core::encoding::EncodingLayout) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        tiers: 5,
        channels: layout.channels(),
        resolution: layout.resolution,
        lambda: 1.0,
        dropout: 0.1,
    }
}
