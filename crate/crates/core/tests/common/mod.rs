#![allow(dead_code)]

use glide::model::{DraftModel, GlideConfig, TargetConfig, TargetModel};
use glide::train::{AdamWConfig, CorpusKind, CorpusSpec, DraftSpec, TrainJobConfig, TrainingConfig};

pub fn target_cfg(vocab: usize, max_seq: usize) -> TargetConfig {
    TargetConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        vocab,
        max_seq,
        ffn_dim: 16,
    }
}

pub fn glide_cfg(target: TargetConfig, n_layers: usize, cross: bool) -> GlideConfig {
    GlideConfig {
        n_layers,
        draft_dim: 8,
        draft_heads: 2,
        ffn_dim: 16,
        block_length: 5,
        cross_attention: cross,
        target,
    }
}

pub fn toy_pair(vocab: usize, max_seq: usize, seed: u64) -> (TargetModel, DraftModel) {
    let t = TargetModel::new(target_cfg(vocab, max_seq), seed).unwrap();
    let d = DraftModel::new(glide_cfg(t.cfg, 1, true), seed ^ 0xd1af).unwrap();
    (t, d)
}

/// The small end-to-end training setup shared by the training, bench and
/// determinism tests.
pub fn small_job(seed: u64) -> TrainJobConfig {
    let opt = AdamWConfig {
        learning_rate: 3e-3,
        ..AdamWConfig::default()
    };
    TrainJobConfig {
        corpus: CorpusSpec {
            kind: CorpusKind::Grammar,
            vocab: 16,
            seq_len: 24,
            train: 128,
            eval: 16,
            seed: 5,
        },
        target: TargetConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            vocab: 16,
            max_seq: 48,
            ffn_dim: 32,
        },
        target_training: TrainingConfig {
            batch_size: 16,
            epochs: 4,
            optimizer: opt,
            seed: 1,
            ..TrainingConfig::default()
        },
        draft: DraftSpec {
            n_layers: 1,
            draft_dim: 8,
            draft_heads: 2,
            ffn_dim: 16,
        },
        draft_training: TrainingConfig {
            batch_size: 16,
            epochs: 4,
            optimizer: opt,
            seed,
            ..TrainingConfig::default()
        },
        train_vanilla: true,
        out_dir: None,
    }
}
