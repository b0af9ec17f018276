//! Default settings per benchmark family.

use serde::{Deserialize, Serialize};

use crate::bench_data::{SplitConfig, SyntheticSpec};
use crate::encoding::EncodingLayout;
use crate::model::ModelConfig;
use crate::numcore::AdamWConfig;
use crate::search::{SearchConfig, SearchMode};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Nb101,
    Nb201,
    Synth,
}

impl Profile {
    pub fn layout(self) -> EncodingLayout {
        match self {
            Profile::Nb101 => EncodingLayout::dag7(),
            Profile::Nb201 => EncodingLayout::fixed4(),
            Profile::Synth => SyntheticSpec::default().layout(),
        }
    }

    pub fn model(self) -> ModelConfig {
        let layout = self.layout();
        let base = ModelConfig {
            channels: layout.channels(),
            resolution: layout.resolution,
            ..ModelConfig::default()
        };
        match self {
            Profile::Synth => ModelConfig {
                layers: 2,
                d_model: 32,
                heads: 4,
                ffn_dim: 64,
                dropout: 0.0,
                ..base
            },
            _ => base,
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Nb101 => TrainConfig::default(),
            Profile::Nb201 => TrainConfig {
                batch_size: 128,
                epochs: 55,
                warmup: 30,
                optimizer: AdamWConfig {
                    beta2: 0.99,
                    weight_decay: 1e-2,
                    ..AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
            Profile::Synth => TrainConfig {
                batch_size: 128,
                epochs: 60,
                warmup: 30,
                ..TrainConfig::default()
            },
        }
    }

    pub fn split(self) -> SplitConfig {
        match self {
            Profile::Nb101 => SplitConfig::default(),
            Profile::Nb201 => SplitConfig {
                train_count: Some(1000),
                validation: 256,
                ..SplitConfig::default()
            },
            Profile::Synth => SplitConfig {
                train_fraction: 0.02,
                ..SplitConfig::default()
            },
        }
    }

    /// Search defaults; the sample size follows the training batch size.
    pub fn search(self) -> SearchConfig {
        SearchConfig {
            sample_size: self.train().batch_size,
            mode: match self {
                Profile::Nb201 => SearchMode::Interval,
                _ => SearchMode::Statistics,
            },
            ..SearchConfig::default()
        }
    }
}
