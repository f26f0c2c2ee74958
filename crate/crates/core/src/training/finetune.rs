use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lr_at, should_stop, BinaryMetrics, BlockId, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Tensor3};
use crate::nn::{cross_entropy, Adam, Gradients, ResidualClassifier};
use crate::preprocess::{to_network_input, PreprocConfig};

const HEAD_SALT: u64 = 0x4845_4144;
const DROPOUT_SALT: u64 = 0x4452_4f50;

/// One classifier input before resizing and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: GrayImage,
    pub positive: bool,
}

/// One line of `metrics.jsonl`. Accuracies are fractions in [0, 1];
/// validation fields are null when no validation data was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub block: BlockId,
    /// Parameters from the epoch with the lowest monitored loss.
    pub model: ResidualClassifier,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ index as u64
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn check_shapes(model: &ResidualClassifier, preproc: &PreprocConfig) -> Result<()> {
    let (c, h, w) = model.input_shape;
    if (c, h, w) != (3, preproc.target_size.0, preproc.target_size.1) {
        return Err(Error::ShapeMismatch {
            expected: format!("{c}x{h}x{w}"),
            found: format!("3x{}x{}", preproc.target_size.0, preproc.target_size.1),
        });
    }
    Ok(())
}

fn add_into(total: &mut Gradients, other: Gradients) {
    for (block, tensors) in other {
        match total.get_mut(&block) {
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(tensors) {
                    a.iter_mut().zip(t).for_each(|(x, y)| *x += y);
                }
            }
            None => {
                total.insert(block, tensors);
            }
        }
    }
}

/// Mean loss and binary metrics of `model` on `examples` (no augmentation,
/// no dropout).
pub fn evaluate(
    model: &ResidualClassifier,
    examples: &[Example],
    preproc: &PreprocConfig,
) -> Result<(f64, BinaryMetrics)> {
    let inputs: Vec<Tensor3> = examples
        .par_iter()
        .map(|e| to_network_input(&e.image, preproc, None))
        .collect();
    evaluate_inputs(model, &inputs, examples)
}

fn evaluate_inputs(
    model: &ResidualClassifier,
    inputs: &[Tensor3],
    examples: &[Example],
) -> Result<(f64, BinaryMetrics)> {
    let scored: Vec<(f64, bool, bool)> = inputs
        .par_iter()
        .zip(examples)
        .map(|(x, e)| {
            let logits = model.logits(x)?;
            let (loss, _) = cross_entropy(&logits, e.positive as usize);
            Ok((loss, argmax(&logits) == 1, e.positive))
        })
        .collect::<Result<_>>()?;
    let loss = scored.iter().map(|s| s.0).sum::<f64>() / scored.len().max(1) as f64;
    Ok((loss, BinaryMetrics::from_pairs(scored.iter().map(|s| (s.1, s.2)))))
}

/// Fine-tunes `block` and everything above it on a copy of `base`.
///
/// A head with other than two outputs is replaced by a fresh Xavier-initialized
/// two-class layer. Each epoch shuffles the training set, runs Adam at
/// [`lr_at`] over batches of averaged cross-entropy gradients, then scores
/// the validation set. Training ends at `max_epochs` or when
/// [`should_stop`] fires on the validation loss (the training loss when no
/// validation data is given).
pub fn finetune(
    base: &ResidualClassifier,
    block: BlockId,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    preproc: &PreprocConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    preproc.validate()?;
    check_shapes(base, preproc)?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut model = base.clone();
    if model.num_classes() != 2 {
        model.replace_head(2, config.seed ^ HEAD_SALT);
    }
    let val_inputs: Vec<Tensor3> = val
        .par_iter()
        .map(|e| to_network_input(&e.image, preproc, None))
        .collect();

    let mut adam = Adam::new(config.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut monitored = Vec::new();
    let mut best = (f64::INFINITY, model.clone(), 0);

    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, bool, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    let seed = example_seed(config.seed, epoch, i);
                    let x = to_network_input(&ex.image, preproc, config.augment.then_some(seed));
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
                    let pass = model.forward(&x, Some((config.dropout, &mut drop_rng)))?;
                    let target = ex.positive as usize;
                    let (loss, mut dlogits) = cross_entropy(&pass.logits, target);
                    let scale = 1.0 / batch.len() as f64;
                    dlogits.iter_mut().for_each(|g| *g *= scale);
                    let hit = argmax(&pass.logits) == target;
                    Ok((loss, hit, model.backward(&pass, &dlogits, block)))
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::new();
            for (loss, hit, grads) in results {
                loss_sum += loss;
                correct += hit as usize;
                add_into(&mut total, grads);
            }
            adam.step(&mut model, &total, lr);
        }

        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (loss, m) = evaluate_inputs(&model, &val_inputs, val)?;
            (Some(loss), Some(m.accuracy / 100.0))
        };
        let train_loss = loss_sum / train.len() as f64;
        let watched = val_loss.unwrap_or(train_loss);
        if watched < best.0 {
            best = (watched, model.clone(), epoch);
        }
        monitored.push(watched);
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if should_stop(&monitored, config.early_stop_patience_epochs) {
            break;
        }
    }
    let (_, model, best_epoch) = best;
    Ok(FinetuneOutcome {
        block,
        model,
        history,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: BlockId,
    pub metrics: BinaryMetrics,
    pub epochs: usize,
}

/// Fine-tunes from `base` once per block, FC down to Conv1, and scores each
/// result on `eval`.
pub fn blockwise_sweep(
    base: &ResidualClassifier,
    train: &[Example],
    val: &[Example],
    eval: &[Example],
    config: &TrainConfig,
    preproc: &PreprocConfig,
) -> Result<Vec<SweepRow>> {
    let blocks: Vec<BlockId> = BlockId::ALL.into_iter().rev().collect();
    blocks
        .par_iter()
        .map(|&block| {
            let outcome = finetune(base, block, train, val, config, preproc)?;
            let (_, metrics) = evaluate(&outcome.model, eval, preproc)?;
            Ok(SweepRow {
                block,
                metrics,
                epochs: outcome.history.len(),
            })
        })
        .collect()
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("| Block | Accuracy | Precision | Recall | F1-score |\n");
    out.push_str("|-------|----------|-----------|--------|----------|\n");
    for r in rows {
        let m = r.metrics;
        writeln!(
            out,
            "| {:<5} | {:>8.2} | {:>9.2} | {:>6.2} | {:>8.2} |",
            r.block.as_str(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        )
        .unwrap();
    }
    out
}

/// Writes a run directory: `config.json` (the given snapshot),
/// `metrics.jsonl` (one [`EpochMetrics`] per line) and `model.json`.
pub fn write_run(dir: &Path, config: &impl Serialize, outcome: &FinetuneOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&path, e))?;
    let mut lines = String::new();
    for m in &outcome.history {
        lines.push_str(&serde_json::to_string(m)?);
        lines.push('\n');
    }
    let path = dir.join("metrics.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    outcome.model.save(&dir.join("model.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::blob_classification_set;

    fn examples(n: usize, seed: u64) -> Vec<Example> {
        blob_classification_set(n, 32, seed)
            .into_iter()
            .map(|(image, positive)| Example { image, positive })
            .collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            max_epochs: 1,
            augment: false,
            ..Default::default()
        }
    }

    #[test]
    fn errors() {
        let base = ResidualClassifier::base(0);
        let pre = PreprocConfig::default();
        assert!(matches!(
            finetune(&base, BlockId::FC, &[], &[], &quick(), &pre),
            Err(Error::EmptyTrainingSet)
        ));
        let small = PreprocConfig {
            target_size: (64, 64),
            ..Default::default()
        };
        assert!(matches!(
            finetune(&base, BlockId::FC, &examples(2, 0), &[], &quick(), &small),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn head_is_replaced_and_run_is_deterministic() {
        let base = ResidualClassifier::base(0);
        let data = examples(6, 1);
        let pre = PreprocConfig::default();
        let cfg = TrainConfig {
            augment: true,
            max_epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let a = finetune(&base, BlockId::Conv5, &data, &data[..2], &cfg, &pre).unwrap();
        let b = finetune(&base, BlockId::Conv5, &data, &data[..2], &cfg, &pre).unwrap();
        assert_eq!(a.model.num_classes(), 2);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn run_directory_layout() {
        let base = ResidualClassifier::base(0);
        let data = examples(4, 2);
        let out = finetune(&base, BlockId::FC, &data, &[], &quick(), &PreprocConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &quick(), &out).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let first: EpochMetrics = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.history[0]);
        assert!(first.val_loss.is_none());
        assert_eq!(ResidualClassifier::load(&dir.path().join("model.json")).unwrap(), out.model);
    }

    #[test]
    fn table_rows() {
        let rows = vec![SweepRow {
            block: BlockId::FC,
            metrics: BinaryMetrics {
                accuracy: 93.75,
                precision: 92.15,
                recall: 90.53,
                f1: 91.15,
            },
            epochs: 4,
        }];
        let t = format_sweep_table(&rows);
        assert!(t.lines().nth(2).unwrap().starts_with("| FC    |    93.75 |"));
    }
}
