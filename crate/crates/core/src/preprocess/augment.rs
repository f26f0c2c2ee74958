use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{BBox, GrayImage};

use super::{resize_bilinear, PreprocConfig};

/// One concrete draw of the augmentation transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    /// Column shift in pixels.
    pub dx: f64,
    /// Row shift in pixels.
    pub dy: f64,
    /// Crop window as fractions of the frame: (row offset, col offset, side).
    pub crop: (f64, f64, f64),
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        dx: 0.0,
        dy: 0.0,
        crop: (0.0, 0.0, 1.0),
        flip: false,
    };

    fn crop_box(&self, height: usize, width: usize) -> BBox {
        let (fr, fc, side) = self.crop;
        let ch = ((side * height as f64).round() as usize).clamp(1, height);
        let cw = ((side * width as f64).round() as usize).clamp(1, width);
        let row = ((fr * height as f64).round() as usize).min(height - ch);
        let col = ((fc * width as f64).round() as usize).min(width - cw);
        BBox {
            row,
            col,
            height: ch,
            width: cw,
        }
    }
}

/// Draws augmentation parameters: rotation uniform in
/// `[-max_rotation_deg, max_rotation_deg]`, per-axis translation uniform in
/// `[-max_translation_px, max_translation_px]`, a crop window of side
/// `crop_fraction` at a uniform offset, and a flip with `hflip_prob`.
pub fn sample_augment(config: &PreprocConfig, seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut symmetric = |limit: f64| {
        if limit > 0.0 {
            rng.random_range(-limit..=limit)
        } else {
            0.0
        }
    };
    let rotation_deg = symmetric(config.max_rotation_deg);
    let dx = symmetric(config.max_translation_px);
    let dy = symmetric(config.max_translation_px);
    let slack = 1.0 - config.crop_fraction;
    let (fr, fc) = if slack > 0.0 {
        (rng.random_range(0.0..=slack), rng.random_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    let flip = config.hflip_prob > 0.0 && rng.random_bool(config.hflip_prob);
    AugmentParams {
        rotation_deg,
        dx,
        dy,
        crop: (fr, fc, config.crop_fraction),
        flip,
    }
}

/// Bilinear sample with zero outside the frame.
fn sample_zero(image: &GrayImage, y: f64, x: f64) -> f64 {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let px = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            image.get(r as usize, c as usize)
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    let bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the centre followed by translation, resampled in one pass.
fn rotate_translate(image: &GrayImage, degrees: f64, dx: f64, dy: f64) -> GrayImage {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    GrayImage::from_fn(h, w, |r, c| {
        // Inverse map: undo the shift, then rotate by -theta.
        let y = r as f64 - dy - cy;
        let x = c as f64 - dx - cx;
        let src_y = cos * y - sin * x + cy;
        let src_x = sin * y + cos * x + cx;
        sample_zero(image, src_y, src_x)
    })
}

/// Applies `params` in order: rotation, translation, crop-and-resize back,
/// horizontal flip. Output has the input's shape; uncovered pixels are 0.
pub fn augment_with(image: &GrayImage, params: &AugmentParams) -> GrayImage {
    let (h, w) = (image.height(), image.width());
    let mut out = if params.rotation_deg == 0.0 && params.dx == 0.0 && params.dy == 0.0 {
        image.clone()
    } else {
        rotate_translate(image, params.rotation_deg, params.dx, params.dy)
    };
    let crop = params.crop_box(h, w);
    if crop != BBox::full(h, w) {
        out = resize_bilinear(&out.crop(crop), h, w);
    }
    if params.flip {
        out = out.flip_horizontal();
    }
    out
}

/// Seeded augmentation: [`sample_augment`] then [`augment_with`].
pub fn augment(image: &GrayImage, config: &PreprocConfig, seed: u64) -> GrayImage {
    augment_with(image, &sample_augment(config, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> GrayImage {
        GrayImage::from_fn(40, 30, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn identity_params_return_input() {
        let img = pattern();
        assert_eq!(augment_with(&img, &AugmentParams::IDENTITY), img);
    }

    #[test]
    fn zero_range_config_is_identity_for_any_seed() {
        let cfg = PreprocConfig {
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            crop_fraction: 1.0,
            hflip_prob: 0.0,
            ..Default::default()
        };
        let img = pattern();
        for seed in 0..10 {
            assert_eq!(sample_augment(&cfg, seed), AugmentParams::IDENTITY);
            assert_eq!(augment(&img, &cfg, seed), img);
        }
    }

    #[test]
    fn shape_is_preserved_and_draws_are_deterministic() {
        let cfg = PreprocConfig::default();
        let img = pattern();
        for seed in 0..20 {
            let a = augment(&img, &cfg, seed);
            assert_eq!((a.height(), a.width()), (40, 30));
            assert_eq!(a, augment(&img, &cfg, seed));
        }
    }

    #[test]
    fn draws_stay_in_bounds() {
        let cfg = PreprocConfig::default();
        for seed in 0..1000 {
            let p = sample_augment(&cfg, seed);
            assert!(p.rotation_deg.abs() <= 15.0);
            assert!(p.dx.abs() <= 20.0 && p.dy.abs() <= 20.0);
            assert!(p.crop.0 <= 0.1 + 1e-12 && p.crop.1 <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn pure_integer_shift_moves_pixels() {
        let img = pattern();
        let p = AugmentParams {
            dx: 3.0,
            dy: -2.0,
            ..AugmentParams::IDENTITY
        };
        let out = augment_with(&img, &p);
        assert_eq!(out.get(10, 13), img.get(12, 10));
        assert_eq!(out.get(39, 0), 0.0);
    }

    #[test]
    fn flip_only() {
        let img = pattern();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(augment_with(&img, &p), img.flip_horizontal());
    }
}
