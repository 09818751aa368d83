#![allow(dead_code)]

use metaxl_cli::config::{DataConfig, ExperimentConfig};
use metaxl_core::bilevel::TrainConfig;
use metaxl_core::data::SyntheticTaskSpec;
use metaxl_core::encoder::EncoderConfig;

/// A study small enough to train in well under a second per cell.
pub fn tiny(name: &str, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seeds,
        train: TrainConfig {
            steps: 12,
            eval_every: 6,
            batch_source: 4,
            batch_target: 4,
            bottleneck_r: 3,
            ..TrainConfig::default()
        },
        encoder: EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            ..EncoderConfig::default()
        },
        data: DataConfig {
            synthetic: Some(SyntheticTaskSpec {
                source_n: 40,
                target_train_n: 8,
                target_dev_n: 8,
                target_test_n: 8,
                ..SyntheticTaskSpec::default()
            }),
            files: None,
        },
        dump_examples: 10,
        ..ExperimentConfig::default()
    }
}
