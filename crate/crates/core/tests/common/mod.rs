#![allow(dead_code)]

use cortis::config::{ExperimentConfig, RemainConfig};
use cortis::evalkit::EvalConfig;
use cortis::experiment::{build_pretrained, Pretrained};
use cortis::numkit::DenseMatrix;
use cortis::toytts::{ModelConfig, PretrainConfig, WorldConfig};
use cortis::unlearn::UnlearnConfig;
use rand::Rng;
use rand_distr::StandardNormal;

/// A world and schedule small enough for a request to take milliseconds.
pub fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        requests: (0..5).map(|s| vec![s]).collect(),
        seeds: vec![0],
        world: WorldConfig {
            num_speakers: 14,
            voice_dim: 8,
            content_dim: 4,
            signal_dim: 24,
            ..WorldConfig::default()
        },
        model: ModelConfig {
            hidden: vec![12, 12],
            seed: 0,
        },
        pretrain: PretrainConfig {
            steps: 400,
            ..PretrainConfig::default()
        },
        remain: RemainConfig {
            train_speakers: (5..10).collect(),
            eval_speakers: (10..14).collect(),
            per_speaker: 6,
            background: 20,
            seed: 0,
        },
        unlearn: UnlearnConfig {
            first_steps: 60,
            later_steps: 30,
            first_interval: 6,
            later_interval: 3,
            rank: 6,
            merge_rank: 6,
            snapshot_batch: 4,
            forget_utterances: 8,
            remain_fisher_samples: 32,
            ..UnlearnConfig::default()
        },
        eval: EvalConfig {
            seeds: 2,
            utterances_per_speaker: 3,
            seed: 0,
        },
        ..ExperimentConfig::default()
    }
}

pub fn small_pretrained() -> (ExperimentConfig, Pretrained) {
    let c = small_config();
    let p = build_pretrained(&c).unwrap();
    (c, p)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}
