use crate::image::{GrayImage, Tensor3};

use super::PreprocConfig;

/// Bilinear resampling with pixel-centre alignment. Resizing to the same
/// shape returns an exact copy.
pub fn resize_bilinear(image: &GrayImage, height: usize, width: usize) -> GrayImage {
    let (h, w) = (image.height(), image.width());
    if (h, w) == (height, width) {
        return image.clone();
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|c| axis(c, sx, w)).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, fy) = axis(r, sy, h);
        for &(c0, c1, fx) in &cols {
            let top = image.get(r0, c0) * (1.0 - fx) + image.get(r0, c1) * fx;
            let bottom = image.get(r1, c0) * (1.0 - fx) + image.get(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(height, width, out).expect("sized by construction")
}

/// Resizes to the configured input size, replicates the gray channel three
/// times and standardizes channel `c` as `(v - mean[c]) / std[c]`.
pub fn resize_normalize(image: &GrayImage, config: &PreprocConfig) -> Tensor3 {
    let (h, w) = config.target_size;
    let resized = resize_bilinear(image, h, w);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let (m, s) = (config.channel_mean[c], config.channel_std[c]);
        data.extend(resized.data().iter().map(|&v| (v - m) / s));
    }
    Tensor3 {
        channels: 3,
        height: h,
        width: w,
        data,
    }
}

/// Network input for `image`: augmented first when `augment_seed` is given
/// (training only), then resized and normalized.
pub fn to_network_input(
    image: &GrayImage,
    config: &PreprocConfig,
    augment_seed: Option<u64>,
) -> Tensor3 {
    match augment_seed {
        Some(seed) => {
            let (h, w) = config.target_size;
            let resized = resize_bilinear(image, h, w);
            resize_normalize(&super::augment(&resized, config, seed), config)
        }
        None => resize_normalize(image, config),
    }
}
