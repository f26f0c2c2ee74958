use std::time::Instant;

use ctdx_core::nn::ResidualClassifier;
use ctdx_core::preprocess::PreprocConfig;
use ctdx_core::synth::blob_classification_set;
use ctdx_core::training::{
    blockwise_sweep, finetune, make_splits, trainable_set, BlockId, Example, SplitConfig, SplitItem,
    TrainConfig,
};

fn blob_examples(n: usize, seed: u64) -> Vec<Example> {
    blob_classification_set(n, 64, seed)
        .into_iter()
        .map(|(image, positive)| Example { image, positive })
        .collect()
}

fn split(data: &[Example]) -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let items: Vec<SplitItem> = data
        .iter()
        .map(|e| SplitItem {
            class: e.positive.to_string(),
            group: None,
        })
        .collect();
    let s = make_splits(
        &items,
        &SplitConfig {
            group_by_patient: false,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    (pick(&s.train), pick(&s.validation), pick(&s.test))
}

#[test]
fn separable_blobs_fc_only() {
    let data = blob_examples(200, 17);
    let (train, val, _) = split(&data);
    let cfg = TrainConfig {
        max_epochs: 10,
        seed: 3,
        ..Default::default()
    };
    let t = Instant::now();
    let out = finetune(&ResidualClassifier::base(1), BlockId::FC, &train, &val, &cfg, &PreprocConfig::default()).unwrap();
    for m in &out.history {
        eprintln!("{m:?}");
    }
    eprintln!("elapsed {:?}", t.elapsed());
    let best = out.history[out.best_epoch].val_accuracy.unwrap();
    assert!(best > 0.9, "validation accuracy {best}");
    assert!(out.history.len() <= 10);
}

#[test]
fn frozen_blocks_are_bit_identical_after_an_epoch() {
    let data = blob_examples(8, 4);
    let base = ResidualClassifier::base(2);
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    for block in BlockId::ALL {
        let out = finetune(&base, block, &data, &[], &cfg, &PreprocConfig::default()).unwrap();
        let trainable = trainable_set(block);
        for b in BlockId::ALL {
            if trainable.contains(&b) {
                if b != BlockId::FC {
                    assert_ne!(out.model.block_params(b), base.block_params(b), "{b} should train");
                }
            } else {
                assert_eq!(out.model.block_params(b), base.block_params(b), "{b} moved while training {block}");
            }
        }
    }
}

#[test]
fn early_stopping_bounds_history() {
    let data = blob_examples(24, 9);
    let (train, val) = data.split_at(16);
    let cfg = TrainConfig {
        max_epochs: 12,
        batch_size: 8,
        seed: 1,
        ..Default::default()
    };
    let out = finetune(&ResidualClassifier::base(0), BlockId::FC, train, val, &cfg, &PreprocConfig::default()).unwrap();
    assert!(out.history.len() <= cfg.max_epochs);
    let losses: Vec<f64> = out.history.iter().map(|m| m.val_loss.unwrap()).collect();
    let argmin = losses
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v < losses[b] { i } else { b });
    assert!(losses.len() - 1 - argmin <= cfg.early_stop_patience_epochs);
    assert_eq!(out.best_epoch, argmin);
}

#[test]
fn sweep_table_rows_are_consistent() {
    let data = blob_examples(24, 6);
    let (train, rest) = data.split_at(16);
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let rows = blockwise_sweep(&ResidualClassifier::base(0), train, &rest[..4], &rest[4..], &cfg, &PreprocConfig::default()).unwrap();
    let order: Vec<BlockId> = rows.iter().map(|r| r.block).collect();
    assert_eq!(order, [BlockId::FC, BlockId::Conv5, BlockId::Conv4, BlockId::Conv3, BlockId::Conv2, BlockId::Conv1]);
    for r in &rows {
        let m = r.metrics;
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            assert!((0.0..=100.0).contains(&v));
        }
        if m.precision + m.recall > 0.0 {
            let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            assert!((hm - m.f1).abs() < 0.01);
        }
    }
}
