//! Blockwise transfer learning for the residual classifier.

mod finetune;
mod split;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::nn::BlockId;
pub use finetune::{
    blockwise_sweep, evaluate, finetune, format_sweep_table, write_run, EpochMetrics, Example,
    FinetuneOutcome, SweepRow,
};
pub use split::{make_splits, SplitConfig, SplitItem, Splits};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout: f64,
    /// Used as Adam's first-moment coefficient.
    pub momentum: f64,
    /// Apply random augmentation to training inputs.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_period_epochs: 2,
            early_stop_patience_epochs: 3,
            batch_size: 16,
            max_epochs: 50,
            dropout: 0.2,
            momentum: 0.9,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("training: {m}")));
        if !(1e-5..=1e-2).contains(&self.initial_lr) {
            return bad(format!("initial_lr {} outside [1e-5, 1e-2]", self.initial_lr));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 0.5]", self.dropout));
        }
        if !(0.6..=0.99).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0.6, 0.99]", self.momentum));
        }
        if self.lr_decay_factor < 1.0 || !self.lr_decay_factor.is_finite() {
            return bad("lr_decay_factor must be at least 1".into());
        }
        if self.lr_decay_period_epochs == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("period, batch size and max epochs must be positive".into());
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 0-indexed epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.lr_decay_period_epochs) as i32;
    config.initial_lr / config.lr_decay_factor.powi(steps)
}

/// `block` and every block above it.
pub fn trainable_set(block: BlockId) -> BTreeSet<BlockId> {
    BlockId::ALL.into_iter().filter(|b| *b >= block).collect()
}

/// True once `patience` epochs have passed without improving on the best
/// loss. The first occurrence of the minimum counts; equal later values are
/// not improvements.
pub fn should_stop(val_losses: &[f64], patience: usize) -> bool {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    let Some(best) = best else {
        return false;
    };
    val_losses.len() - 1 - best.0 >= patience
}

/// Hyperparameter search ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSpace {
    pub dropout: (f64, f64),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub momentum: (f64, f64),
}

impl Default for HpoSpace {
    fn default() -> Self {
        Self {
            dropout: (0.0, 0.5),
            learning_rate: (1e-5, 1e-2),
            momentum: (0.6, 0.99),
        }
    }
}

/// Draws dropout, learning rate and momentum from `space` on top of `base`.
pub fn hpo_sample(space: &HpoSpace, base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = space.learning_rate;
    let log_lr = rng.random_range(lo.log10()..=hi.log10());
    TrainConfig {
        dropout: rng.random_range(space.dropout.0..=space.dropout.1),
        initial_lr: 10f64.powf(log_lr).clamp(lo, hi),
        momentum: rng.random_range(space.momentum.0..=space.momentum.1),
        seed,
        ..base.clone()
    }
}

/// Binary classification metrics, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryMetrics {
    /// From `(predicted, actual)` pairs. Undefined ratios are reported as 0.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self {
            accuracy: 100.0 * ratio(tp + tn, tp + tn + fp + fn_),
            precision: 100.0 * p,
            recall: 100.0 * r,
            f1: 100.0 * f1,
        }
    }
}
