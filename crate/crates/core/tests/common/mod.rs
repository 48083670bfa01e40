//! Small corpora and configs shared by the integration tests.
#![allow(dead_code)]

use forensic_seg::data::{generate_corpus, CorpusConfig};
use forensic_seg::pipeline::Setting;
use forensic_seg::reasoner::ReasonerConfig;
use forensic_seg::seg_decoder::SegConfig;
use forensic_seg::trainer::{Dataset, TrainConfig};

pub fn data(train: usize, seed: u64) -> Dataset {
    Dataset::from_corpus(
        &generate_corpus(&CorpusConfig {
            train,
            seen: 3,
            unseen: 2,
            size: 32,
            seed,
        })
        .unwrap(),
    )
}

pub fn tiny(setting: Setting, steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        max_steps: steps,
        setting,
        reasoner: ReasonerConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 64,
            patch: 8,
            query_dim: 8,
            seed: 0,
        },
        seg: SegConfig {
            d_feat: 16,
            patch: 8,
            n_heads: 2,
            query_dim: 8,
        },
        max_new: 16,
        ..TrainConfig::default()
    }
}
