//! 8-connected component labelling and two-class histogram thresholding.

use crate::image::{BBox, GrayImage, Mask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// 1-based label, in raster order of each component's first pixel.
    pub label: u32,
    pub area: usize,
    pub bbox: BBox,
    pub touches_border: bool,
}

#[derive(Debug, Clone)]
pub struct Labeling {
    pub height: usize,
    pub width: usize,
    /// 0 for background, otherwise the component label.
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl Labeling {
    pub fn mask_of(&self, label: u32) -> Mask {
        let mut m = Mask::new(self.height, self.width);
        for (i, &l) in self.labels.iter().enumerate() {
            if l == label {
                m.set(i / self.width, i % self.width, true);
            }
        }
        m
    }
}

/// Labels the 8-connected components of the true cells of `mask`.
pub fn label_components(mask: &Mask) -> Labeling {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for start in 0..h * w {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        let mut touches_border = false;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            area += 1;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            touches_border |= r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.data()[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        components.push(Component {
            label,
            area,
            bbox: BBox {
                row: r0,
                col: c0,
                height: r1 - r0 + 1,
                width: c1 - c0 + 1,
            },
            touches_border,
        });
    }
    Labeling {
        height: h,
        width: w,
        labels,
        components,
    }
}

pub const HISTOGRAM_BINS: usize = 256;

/// 256-bin histogram of unit-interval intensities (bin = round(v * 255)).
pub fn histogram(image: &GrayImage) -> [u64; HISTOGRAM_BINS] {
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &v in image.data() {
        hist[intensity_bin(v)] += 1;
    }
    hist
}

#[inline]
pub fn intensity_bin(v: f64) -> usize {
    let v = if v.is_finite() { v } else { 0.0 };
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

/// Bin index `t` maximizing the between-class variance of the split
/// `{bins <= t} | {bins > t}`.
///
/// When several thresholds tie (an empty gap between two modes), the middle
/// of the tied run is returned. `None` when every split leaves one class
/// empty, i.e. the histogram occupies a single bin.
pub fn otsu_threshold(hist: &[u64; HISTOGRAM_BINS]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let total = total as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();

    let mut best = 0.0;
    let mut first_best = None;
    let mut last_best = None;
    let (mut w0, mut sum0) = (0.0, 0.0);
    for (t, &n) in hist.iter().enumerate().take(HISTOGRAM_BINS - 1) {
        w0 += n as f64;
        sum0 += t as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        let tol = 1e-12 * best;
        if between > best + tol {
            best = between;
            first_best = Some(t);
            last_best = Some(t);
        } else if (between - best).abs() <= tol && last_best == Some(t - 1) {
            last_best = Some(t);
        }
    }
    match (first_best, last_best) {
        (Some(a), Some(b)) if best > 0.0 => Some((a + b) / 2),
        _ => None,
    }
}
