//! Activation-based lesion quantification and severity tracking.
//!
//! For a segment classified positive, the final-convolution activations
//! `A^k` (k = 1..N, each h x w) and the positive-class score gradient
//! `dy/dA^k` give per-map weights `w_k = mean_ij dy/dA^k_ij`. The default
//! quantification value is
//!
//! ```text
//! Q = max(0, sum_k max_ij (w_k * A^k_ij))
//! ```
//!
//! The weight multiplies before the spatial max, so a negative weight picks
//! the smallest activation of its map. [`CamVariant::GradCam`] offers the
//! usual weighted-sum-then-aggregate form, `sum_ij max(0, sum_k w_k A^k_ij)`,
//! for comparison.

mod progress;
pub mod reference;

use serde::{Deserialize, Serialize};

pub use progress::{
    correlate_medications, forecast, severity, trend_slope, Baseline, MedicationEffect, SlopeComparison,
    ASSOCIATION_NOTE, FORECAST_WINDOW,
};

use crate::diagnosis::SegmentResult;
use crate::error::{Error, Result};
use crate::image::Tensor3;
use crate::nn::{Fmap, ResidualClassifier};

/// Final-convolution activations: `n` maps of `h x w`, map-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn check_grid(n: usize, h: usize, w: usize, data: &[f64]) -> Result<()> {
    if n == 0 || h == 0 || w == 0 || data.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{h}x{w} with all dimensions positive"),
            found: format!("{} values", data.len()),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite activation or gradient".into()));
    }
    Ok(())
}

impl FeatureMaps {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        check_grid(n, h, w, &data)?;
        Ok(Self { n, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.h + i) * self.w + j]
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// A copy with every activation multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// `dy^c / dA^k_ij` for one class, congruent with a [`FeatureMaps`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradients {
    pub class_index: usize,
    n: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ClassGradients {
    pub fn new(class_index: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        check_grid(n, h, w, &data)?;
        Ok(Self {
            class_index,
            n,
            h,
            w,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.h + i) * self.w + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamVariant {
    /// Per-map spatial max inside the sum over maps.
    #[default]
    AsWritten,
    /// Weighted sum over maps, rectified per pixel, summed over pixels.
    GradCam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantificationResult {
    #[serde(rename = "Q")]
    pub q: f64,
    /// Pre-rectification per-map terms.
    pub per_map_contributions: Vec<f64>,
    #[serde(default)]
    pub segment_id: Option<String>,
}

/// Spatial mean of the gradient of each map.
pub fn cam_weights(grads: &ClassGradients) -> Vec<f64> {
    let area = (grads.h * grads.w) as f64;
    grads
        .data
        .chunks_exact(grads.h * grads.w)
        .map(|g| g.iter().sum::<f64>() / area)
        .collect()
}

fn check_weights(maps: &FeatureMaps, weights: &[f64]) -> Result<()> {
    if weights.len() != maps.n {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", maps.n),
            found: format!("{} weights", weights.len()),
        });
    }
    Ok(())
}

/// Quantification value with the default variant.
pub fn quantify(maps: &FeatureMaps, weights: &[f64]) -> Result<QuantificationResult> {
    quantify_with(maps, weights, CamVariant::AsWritten)
}

pub fn quantify_with(
    maps: &FeatureMaps,
    weights: &[f64],
    variant: CamVariant,
) -> Result<QuantificationResult> {
    check_weights(maps, weights)?;
    let per_map_contributions: Vec<f64> = match variant {
        CamVariant::AsWritten => (0..maps.n)
            .map(|k| {
                maps.map(k)
                    .iter()
                    .map(|&a| weights[k] * a)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
        CamVariant::GradCam => (0..maps.n)
            .map(|k| maps.map(k).iter().map(|&a| weights[k] * a).sum())
            .collect(),
    };
    let q = match variant {
        CamVariant::AsWritten => per_map_contributions.iter().sum::<f64>().max(0.0),
        CamVariant::GradCam => {
            let hw = maps.h * maps.w;
            (0..hw)
                .map(|p| {
                    (0..maps.n)
                        .map(|k| weights[k] * maps.data[k * hw + p])
                        .sum::<f64>()
                        .max(0.0)
                })
                .sum()
        }
    };
    Ok(QuantificationResult {
        q,
        per_map_contributions,
        segment_id: None,
    })
}

/// Scan-level Q: the sum of segment Q values over segments labeled
/// positive; 0 when there are none.
pub fn quantify_scan(segments: &[SegmentResult]) -> f64 {
    segments
        .iter()
        .filter(|s| s.label.is_positive())
        .filter_map(|s| s.q)
        // `sum` starts from -0.0, which would serialize as "-0.0".
        .fold(0.0, |acc, q| acc + q)
}

/// A model whose final convolution can be observed and differentiated.
pub trait ActivationModel {
    /// Final-convolution activations for `input`, or
    /// [`Error::NoCapturePoint`].
    fn capture(&self, input: &Tensor3) -> Result<FeatureMaps>;

    /// Class scores computed from captured activations.
    fn scores_from_activations(&self, maps: &FeatureMaps) -> Result<Vec<f64>>;

    /// Gradient of class score `class` with respect to the activations.
    fn score_gradient(&self, maps: &FeatureMaps, class: usize) -> Result<ClassGradients>;
}

/// Captures activations for `input`, differentiates the score of `class`,
/// and quantifies.
pub fn quantify_segment(
    model: &dyn ActivationModel,
    input: &Tensor3,
    class: usize,
    variant: CamVariant,
    segment_id: Option<String>,
) -> Result<QuantificationResult> {
    let maps = model.capture(input)?;
    let grads = model.score_gradient(&maps, class)?;
    let mut result = quantify_with(&maps, &cam_weights(&grads), variant)?;
    result.segment_id = segment_id;
    Ok(result)
}

fn to_fmap(maps: &FeatureMaps) -> Fmap {
    Fmap {
        h: maps.h,
        w: maps.w,
        data: ndarray::Array2::from_shape_vec((maps.n, maps.h * maps.w), maps.data.clone())
            .expect("checked shape"),
    }
}

impl ActivationModel for ResidualClassifier {
    fn capture(&self, input: &Tensor3) -> Result<FeatureMaps> {
        let pass = self.forward::<rand_chacha::ChaCha8Rng>(input, None)?;
        let f = pass.features();
        FeatureMaps::new(f.channels(), f.h, f.w, f.data.iter().copied().collect())
    }

    fn scores_from_activations(&self, maps: &FeatureMaps) -> Result<Vec<f64>> {
        if maps.n != self.fc.in_features {
            return Err(Error::ShapeMismatch {
                expected: format!("{} maps", self.fc.in_features),
                found: format!("{} maps", maps.n),
            });
        }
        Ok(self.scores_from_features(&to_fmap(maps)))
    }

    fn score_gradient(&self, maps: &FeatureMaps, class: usize) -> Result<ClassGradients> {
        self.scores_from_activations(maps)?;
        if class >= self.num_classes() {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        let g = self.score_gradient(&to_fmap(maps), class);
        ClassGradients::new(class, maps.n, maps.h, maps.w, g.iter().copied().collect())
    }
}
