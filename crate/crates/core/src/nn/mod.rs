//! A small five-block residual image classifier with manual backpropagation.
//!
//! Layout for a 3x224x224 input:
//!
//! | block | layers                                   | output      |
//! |-------|------------------------------------------|-------------|
//! | Conv1 | 3x3/2 conv 3->8, ReLU, 2x2 max pool      | 8x56x56     |
//! | Conv2 | residual, 8->8                           | 8x56x56     |
//! | Conv3 | residual, 8->16, stride 2                | 16x28x28    |
//! | Conv4 | residual, 16->32, stride 2               | 32x14x14    |
//! | Conv5 | residual, 32->64, stride 2               | 64x7x7      |
//! | FC    | global average pool, dropout, linear     | classes     |
//!
//! The Conv5 output is the final-convolution capture point used by severity
//! quantification.

mod layers;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Conv2d, Fmap, Linear, ResidualBlock};
pub use optim::Adam;

use crate::error::{Error, Result};
use crate::image::Tensor3;
use layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu_backward,
    ConvCache, ResidualCache,
};

pub const MODEL_FORMAT: &str = "ctdx-resnet/v1";
pub const INPUT_SHAPE: (usize, usize, usize) = (3, 224, 224);
const WIDTHS: [usize; 5] = [8, 8, 16, 32, 64];
/// Output count of the general-purpose head that ships with a base model.
pub const BASE_CLASSES: usize = 10;

/// Trainable unit of the classifier, ordered from input to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockId {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Conv5,
    FC,
}

impl BlockId {
    pub const ALL: [BlockId; 6] = [
        BlockId::Conv1,
        BlockId::Conv2,
        BlockId::Conv3,
        BlockId::Conv4,
        BlockId::Conv5,
        BlockId::FC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockId::Conv1 => "Conv1",
            BlockId::Conv2 => "Conv2",
            BlockId::Conv3 => "Conv3",
            BlockId::Conv4 => "Conv4",
            BlockId::Conv5 => "Conv5",
            BlockId::FC => "FC",
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        BlockId::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown block {s:?}; expected one of FC, Conv5 .. Conv1"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualClassifier {
    pub format: String,
    pub input_shape: (usize, usize, usize),
    pub stem: Conv2d,
    /// Conv2 through Conv5.
    pub blocks: Vec<ResidualBlock>,
    pub fc: Linear,
}

/// Per-tensor gradients keyed by block, in the order of
/// [`ResidualClassifier::block_params`].
pub type Gradients = BTreeMap<BlockId, Vec<Vec<f64>>>;

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardPass {
    stem: ConvCache,
    stem_out: Fmap,
    pool_idx: Vec<usize>,
    blocks: Vec<ResidualCache>,
    /// Per-feature dropout multiplier: 0, `1/(1-p)`, or 1 without dropout.
    drop_scale: Vec<f64>,
    fc_in: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    /// Conv5 output.
    pub fn features(&self) -> &Fmap {
        &self.blocks.last().expect("four blocks").out
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl ResidualClassifier {
    /// A base network with He-initialized convolutions and a
    /// [`BASE_CLASSES`]-way head, deterministic per seed.
    pub fn base(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::he(&mut rng, INPUT_SHAPE.0, WIDTHS[0], 3, 2, 1);
        let blocks = (1..5)
            .map(|i| {
                let stride = if i == 1 { 1 } else { 2 };
                ResidualBlock::he(&mut rng, WIDTHS[i - 1], WIDTHS[i], stride)
            })
            .collect();
        let fc = Linear::xavier(&mut rng, WIDTHS[4], BASE_CLASSES);
        Self {
            format: MODEL_FORMAT.into(),
            input_shape: INPUT_SHAPE,
            stem,
            blocks,
            fc,
        }
    }

    /// Swaps the head for a fresh Xavier-initialized `classes`-way layer.
    pub fn replace_head(&mut self, classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.fc = Linear::xavier(&mut rng, self.fc.in_features, classes);
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.format != MODEL_FORMAT {
            return Err(format!("format {:?}, expected {MODEL_FORMAT:?}", self.format));
        }
        if self.input_shape.1 < 32 || self.input_shape.2 < 32 {
            return Err("input must be at least 32x32".into());
        }
        self.stem.check()?;
        if self.stem.in_channels != self.input_shape.0 || self.stem.kernel != 3 {
            return Err("stem does not match the input".into());
        }
        if self.blocks.len() != 4 {
            return Err(format!("expected 4 residual blocks, found {}", self.blocks.len()));
        }
        let mut channels = self.stem.out_channels;
        for b in &self.blocks {
            b.check()?;
            if b.in_channels() != channels {
                return Err("residual blocks do not chain".into());
            }
            channels = b.out_channels();
        }
        self.fc.check()?;
        if self.fc.in_features != channels {
            return Err("head width does not match Conv5".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let model: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::ModelLoad {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn block_params(&self, block: BlockId) -> Vec<&Vec<f64>> {
        match block {
            BlockId::Conv1 => vec![&self.stem.weight, &self.stem.bias],
            BlockId::FC => vec![&self.fc.weight, &self.fc.bias],
            b => self.blocks[b as usize - 1].params(),
        }
    }

    pub fn block_params_mut(&mut self, block: BlockId) -> Vec<&mut Vec<f64>> {
        match block {
            BlockId::Conv1 => vec![&mut self.stem.weight, &mut self.stem.bias],
            BlockId::FC => vec![&mut self.fc.weight, &mut self.fc.bias],
            b => self.blocks[b as usize - 1].params_mut(),
        }
    }

    pub fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.shape() != self.input_shape {
            let (c, h, w) = self.input_shape;
            let (fc, fh, fw) = x.shape();
            return Err(Error::ShapeMismatch {
                expected: format!("{c}x{h}x{w}"),
                found: format!("{fc}x{fh}x{fw}"),
            });
        }
        Ok(())
    }

    /// Forward pass. With `dropout = Some((p, rng))` pooled features are
    /// dropped with probability `p` and the survivors scaled by `1/(1-p)`.
    pub fn forward<R: Rng>(&self, x: &Tensor3, dropout: Option<(f64, &mut R)>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let input = Fmap {
            h: x.height,
            w: x.width,
            data: Array2::from_shape_vec((x.channels, x.height * x.width), x.data.clone())
                .expect("checked shape"),
        };
        let (mut stem_out, stem) = self.stem.forward(&input);
        stem_out.data.mapv_inplace(|v| v.max(0.0));
        let (pooled_map, pool_idx) = maxpool2(&stem_out);
        let mut caches: Vec<ResidualCache> = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let x = if i == 0 { &pooled_map } else { &caches[i - 1].out };
            let cache = block.forward(x);
            caches.push(cache);
        }
        let pooled = global_avg_pool(&caches[3].out);
        let drop_scale: Vec<f64> = match dropout {
            Some((p, rng)) if p > 0.0 => (0..pooled.len())
                .map(|_| if rng.random_bool(p) { 0.0 } else { 1.0 / (1.0 - p) })
                .collect(),
            _ => vec![1.0; pooled.len()],
        };
        let fc_in: Vec<f64> = pooled.iter().zip(&drop_scale).map(|(v, s)| v * s).collect();
        let logits = self.fc.forward(&fc_in);
        Ok(ForwardPass {
            stem,
            stem_out,
            pool_idx,
            blocks: caches,
            drop_scale,
            fc_in,
            logits,
        })
    }

    pub fn logits(&self, x: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.forward::<ChaCha8Rng>(x, None)?.logits)
    }

    /// Backpropagates `dlogits` through the network, producing gradients for
    /// every block at or above `lowest` and nothing below it.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64], lowest: BlockId) -> Gradients {
        let mut grads = Gradients::new();
        let (dw, db, dfc_in) = self.fc.backward(&pass.fc_in, dlogits);
        grads.insert(BlockId::FC, vec![dw, db]);
        if lowest == BlockId::FC {
            return grads;
        }
        let dpooled: Vec<f64> = dfc_in.iter().zip(&pass.drop_scale).map(|(g, s)| g * s).collect();
        let last = pass.features();
        let mut d = global_avg_pool_backward(&dpooled, last.h, last.w);
        for i in (0..4).rev() {
            let id = BlockId::ALL[i + 1];
            let want_input = lowest < id;
            let (g, dx) = self.blocks[i].backward(&pass.blocks[i], &d, want_input);
            grads.insert(id, g);
            match dx {
                Some(dx) => d = dx.data,
                None => return grads,
            }
        }
        let dpool = Fmap {
            h: pass.blocks[0].out.h,
            w: pass.blocks[0].out.w,
            data: d,
        };
        let mut dstem = maxpool2_backward(&dpool, &pass.pool_idx, pass.stem_out.h, pass.stem_out.w).data;
        relu_backward(&mut dstem, &pass.stem_out.data);
        let (dw, db, _) = self.stem.backward(&pass.stem, &dstem, false);
        grads.insert(BlockId::Conv1, vec![dw, db]);
        grads
    }

    /// Class scores from Conv5 activations (no dropout).
    pub fn scores_from_features(&self, features: &Fmap) -> Vec<f64> {
        self.fc.forward(&global_avg_pool(features))
    }

    /// `d score[class] / d features`, shaped like `features`.
    pub fn score_gradient(&self, features: &Fmap, class: usize) -> Array2<f64> {
        let n = self.fc.in_features;
        let row = &self.fc.weight[class * n..(class + 1) * n];
        global_avg_pool_backward(row, features.h, features.w)
    }
}

/// Softmax cross-entropy for one example and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| pi - if i == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = INPUT_SHAPE;
        Tensor3 {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    #[test]
    fn block_order() {
        assert!(BlockId::Conv1 < BlockId::Conv2);
        assert!(BlockId::Conv5 < BlockId::FC);
        assert_eq!("conv3".parse::<BlockId>().unwrap(), BlockId::Conv3);
        assert!("Conv6".parse::<BlockId>().is_err());
    }

    #[test]
    fn shapes_and_capture_point() {
        let m = ResidualClassifier::base(0);
        m.validate().unwrap();
        let pass = m.forward::<ChaCha8Rng>(&input(1), None).unwrap();
        assert_eq!(pass.logits.len(), BASE_CLASSES);
        let f = pass.features();
        assert_eq!((f.channels(), f.h, f.w), (64, 7, 7));
        assert!(f.data.iter().any(|&v| v > 0.0));
        assert_eq!(m.scores_from_features(f), pass.logits);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = ResidualClassifier::base(0);
        let x = Tensor3::zeros(3, 64, 64);
        assert!(matches!(m.logits(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn json_roundtrip() {
        let mut m = ResidualClassifier::base(3);
        m.replace_head(2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(ResidualClassifier::load(&path).unwrap(), m);
        let mut broken = m.clone();
        broken.blocks[2].conv_a.weight.pop();
        fs::write(&path, serde_json::to_string(&broken).unwrap()).unwrap();
        assert!(matches!(ResidualClassifier::load(&path), Err(Error::ModelLoad { .. })));
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let mut m = ResidualClassifier::base(5);
        m.replace_head(2, 6);
        let x = input(7);
        let loss = |m: &ResidualClassifier| cross_entropy(&m.logits(&x).unwrap(), 1).0;
        let pass = m.forward::<ChaCha8Rng>(&x, None).unwrap();
        let (_, dlogits) = cross_entropy(&pass.logits, 1);
        let grads = m.backward(&pass, &dlogits, BlockId::Conv1);
        assert_eq!(grads.len(), 6);
        let eps = 1e-5;
        for block in BlockId::ALL {
            let g = &grads[&block];
            let i = g[0].len() / 3;
            let mut p = m.clone();
            p.block_params_mut(block)[0][i] += eps;
            let mut q = m.clone();
            q.block_params_mut(block)[0][i] -= eps;
            let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
            let tol = 1e-6 + 1e-4 * fd.abs().max(g[0][i].abs());
            assert!((fd - g[0][i]).abs() < tol, "{block}: fd {fd} vs {}", g[0][i]);
        }
    }

    #[test]
    fn backward_stops_at_lowest_block() {
        let m = ResidualClassifier::base(0);
        let pass = m.forward::<ChaCha8Rng>(&input(2), None).unwrap();
        let d = vec![0.1; BASE_CLASSES];
        let g = m.backward(&pass, &d, BlockId::Conv4);
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), [BlockId::Conv4, BlockId::Conv5, BlockId::FC]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (l, g) = cross_entropy(&[2.0, -1.0], 0);
        assert!(l > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }
}
