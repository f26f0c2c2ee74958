use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Summed-area table with one row/column of zero padding.
struct Integral {
    width: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], height: usize, width: usize) -> Self {
        let stride = width + 1;
        let mut sum = vec![0.0; (height + 1) * stride];
        let mut sq = vec![0.0; (height + 1) * stride];
        for r in 0..height {
            let (mut row_sum, mut row_sq) = (0.0, 0.0);
            for c in 0..width {
                let v = values[r * width + c];
                row_sum += v;
                row_sq += v * v;
                let i = (r + 1) * stride + c + 1;
                sum[i] = sum[i - stride] + row_sum;
                sq[i] = sq[i - stride] + row_sq;
            }
        }
        Self {
            width: stride,
            sum,
            sq,
        }
    }

    /// Sums over rows `r0..r1`, cols `c0..c1`.
    fn rect(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> (f64, f64) {
        let w = self.width;
        let pick = |t: &[f64]| t[r1 * w + c1] - t[r0 * w + c1] - t[r1 * w + c0] + t[r0 * w + c0];
        (pick(&self.sum), pick(&self.sq))
    }
}

/// Adaptive Wiener smoothing over a `window` x `window` neighbourhood.
///
/// For each pixel with local mean `m` and local variance `v`, the output is
/// `m + max(0, v - n) / max(v, n) * (x - m)`, where the noise power `n` is the
/// mean of all local variances. Windows are clipped at the image border.
/// The result is clamped to the input's intensity range, so the filter never
/// widens it.
pub fn wiener_filter(image: &GrayImage, window: usize) -> Result<GrayImage> {
    let (h, w) = (image.height(), image.width());
    let limit = h.min(w);
    if window < 3 || window % 2 == 0 || window > limit {
        return Err(Error::InvalidWindow { window, limit });
    }
    let half = window / 2;

    // Work on deviations from one pixel so a constant image is all zeros and
    // passes through exactly.
    let reference = image.data()[0];
    let dev: Vec<f64> = image.data().iter().map(|&v| v - reference).collect();
    let table = Integral::new(&dev, h, w);

    let mut means = Vec::with_capacity(h * w);
    let mut vars = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let (s, sq) = table.rect(r0, c0, r1, c1);
            let mean = s / n;
            means.push(mean);
            vars.push((sq / n - mean * mean).max(0.0));
        }
    }
    let noise = vars.iter().sum::<f64>() / vars.len() as f64;

    let (lo, hi) = image.min_max();
    let out = dev
        .iter()
        .zip(means.iter().zip(&vars))
        .map(|(&x, (&mean, &var))| {
            let denom = var.max(noise);
            let gain = if denom > 0.0 {
                (var - noise).max(0.0) / denom
            } else {
                0.0
            };
            (reference + mean + gain * (x - mean)).clamp(lo, hi)
        })
        .collect();
    GrayImage::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn direct_tv(img: &GrayImage) -> f64 {
        let mut tv = 0.0;
        for r in 0..img.height() {
            for c in 0..img.width() {
                if r > 0 {
                    tv += (img.get(r, c) - img.get(r - 1, c)).abs();
                }
                if c > 0 {
                    tv += (img.get(r, c) - img.get(r, c - 1)).abs();
                }
            }
        }
        tv
    }

    #[test]
    fn constant_image_is_unchanged() {
        for v in [0.0, 0.3, 0.7, 1.0] {
            let img = GrayImage::filled(16, 20, v);
            assert_eq!(wiener_filter(&img, 5).unwrap(), img);
        }
    }

    #[test]
    fn impulse_noise_total_variation_drops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut img = GrayImage::filled(48, 48, 0.4);
        for _ in 0..120 {
            let (r, c) = (rng.random_range(0..48), rng.random_range(0..48));
            img.set(r, c, if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        }
        let out = wiener_filter(&img, 5).unwrap();
        let (before, after) = (direct_tv(&img), direct_tv(&out));
        assert!(after < before, "tv {before} -> {after}");
        assert!((img.total_variation() - before).abs() < 1e-9);
    }

    #[test]
    fn range_never_grows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = GrayImage::from_fn(30, 25, |_, _| rng.random_range(0.2..0.6));
        let out = wiener_filter(&img, 3).unwrap();
        let (lo, hi) = img.min_max();
        let (olo, ohi) = out.min_max();
        assert!(olo >= lo && ohi <= hi);
        assert_eq!((out.height(), out.width()), (30, 25));
    }

    #[test]
    fn window_preconditions() {
        let img = GrayImage::filled(10, 12, 0.5);
        assert!(matches!(
            wiener_filter(&img, 4),
            Err(Error::InvalidWindow { window: 4, .. })
        ));
        assert!(wiener_filter(&img, 1).is_err());
        assert!(wiener_filter(&img, 11).is_err());
        assert!(wiener_filter(&img, 9).is_ok());
    }

    #[test]
    fn strong_edges_survive() {
        let img = GrayImage::from_fn(32, 32, |_, c| if c < 16 { 0.1 } else { 0.8 });
        let out = wiener_filter(&img, 5).unwrap();
        assert!(out.get(10, 5) < 0.15 && out.get(10, 27) > 0.75);
    }
}
