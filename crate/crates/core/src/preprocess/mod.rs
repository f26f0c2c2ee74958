//! Image preprocessing: denoising, lung-field extraction, slice selection,
//! network-input preparation and training-time augmentation.

mod augment;
mod select;
mod thorax;
mod transform;
mod wiener;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, augment_with, sample_augment, AugmentParams};
pub use select::select_slices;
pub use thorax::{extract_thorax, ThoraxExtraction};
pub use transform::{resize_bilinear, resize_normalize, to_network_input};
pub use wiener::wiener_filter;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    /// Side of the square Wiener window, odd and at least 3.
    pub wiener_window: usize,
    /// Network input size as (height, width).
    pub target_size: (usize, usize),
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    /// Fraction of each side kept by the random crop.
    pub crop_fraction: f64,
    pub hflip_prob: f64,
    /// Base seed for augmentation draws.
    pub seed: u64,
    /// Slices taken from each scan.
    pub slices_per_scan: usize,
    /// `None` selects slices at fixed relative depths.
    pub selection_seed: Option<u64>,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            wiener_window: 5,
            target_size: (224, 224),
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
            max_rotation_deg: 15.0,
            max_translation_px: 20.0,
            crop_fraction: 0.9,
            hflip_prob: 0.5,
            seed: 0,
            slices_per_scan: 2,
            selection_seed: None,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("preprocessing: {m}")));
        if self.wiener_window < 3 || self.wiener_window % 2 == 0 {
            return bad("wiener_window must be odd and >= 3");
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return bad("target_size must be positive");
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad("channel_std must be strictly positive");
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return bad("channel_mean must be finite");
        }
        if !(self.max_rotation_deg >= 0.0) || !(self.max_translation_px >= 0.0) {
            return bad("augmentation ranges must be nonnegative");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must be in [0, 1]");
        }
        if self.slices_per_scan == 0 {
            return bad("slices_per_scan must be positive");
        }
        Ok(())
    }
}
