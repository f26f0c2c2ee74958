use crate::components::{histogram, intensity_bin, label_components, otsu_threshold};
use crate::image::{BBox, GrayImage, Mask};
use crate::scan::MIN_SLICE_SIDE;

/// Lung-field mask of a slice and the slice cropped to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ThoraxExtraction {
    /// Full-frame mask. On fallback every cell is set.
    pub mask: Mask,
    /// Joint bounding box of the kept components; the full frame on fallback.
    pub bbox: BBox,
    pub cropped: GrayImage,
    /// Histogram bin (0..=255) separating the dark class, when one exists.
    pub threshold_bin: Option<usize>,
    /// False when no interior dark component was found ("thorax-not-found").
    pub found: bool,
}

impl ThoraxExtraction {
    fn fallback(image: &GrayImage, threshold_bin: Option<usize>) -> Self {
        let (h, w) = (image.height(), image.width());
        Self {
            mask: Mask::full(h, w),
            bbox: BBox::full(h, w),
            cropped: image.clone(),
            threshold_bin,
            found: false,
        }
    }

    /// The lung mask restricted to `bbox`, congruent with `cropped`.
    pub fn cropped_mask(&self) -> Mask {
        self.mask.crop(self.bbox)
    }
}

/// Separates the lung fields from the rest of a (denoised) slice.
///
/// The gray-level histogram is split into two classes by maximizing
/// between-class variance. Below-threshold pixels are grouped into
/// 8-connected components; components touching the image border (air
/// around the body) are dropped and the two largest remaining ones form the
/// lung mask.
pub fn extract_thorax(image: &GrayImage) -> ThoraxExtraction {
    let Some(t) = otsu_threshold(&histogram(image)) else {
        return ThoraxExtraction::fallback(image, None);
    };
    let dark = Mask::from_fn(image.height(), image.width(), |r, c| {
        intensity_bin(image.get(r, c)) <= t
    });
    let labeling = label_components(&dark);
    let mut interior: Vec<_> = labeling
        .components
        .iter()
        .filter(|c| !c.touches_border)
        .collect();
    // Largest first; equal areas keep raster order.
    interior.sort_by(|a, b| b.area.cmp(&a.area).then(a.label.cmp(&b.label)));
    interior.truncate(2);
    if interior.is_empty() {
        return ThoraxExtraction::fallback(image, Some(t));
    }

    let mut mask = Mask::new(image.height(), image.width());
    let mut bbox = interior[0].bbox;
    for comp in &interior {
        mask.union_with(&labeling.mask_of(comp.label));
        bbox = bbox.union(&comp.bbox);
    }
    if bbox.height < MIN_SLICE_SIDE || bbox.width < MIN_SLICE_SIDE {
        return ThoraxExtraction::fallback(image, Some(t));
    }
    ThoraxExtraction {
        cropped: image.crop(bbox),
        mask,
        bbox,
        threshold_bin: Some(t),
        found: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(r: usize, c: usize, cr: f64, cc: f64, rad: f64) -> bool {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        dr * dr + dc * dc <= rad * rad
    }

    /// Dark background, bright body disk, two dark lung disks inside it.
    fn phantom() -> GrayImage {
        GrayImage::from_fn(64, 64, |r, c| {
            if disk(r, c, 32.0, 22.0, 7.0) || disk(r, c, 32.0, 42.0, 7.0) {
                0.1
            } else if disk(r, c, 32.0, 32.0, 26.0) {
                0.85
            } else {
                0.0
            }
        })
    }

    /// Lung cells straight from the phantom geometry.
    fn oracle_lungs() -> Mask {
        Mask::from_fn(64, 64, |r, c| {
            disk(r, c, 32.0, 22.0, 7.0) || disk(r, c, 32.0, 42.0, 7.0)
        })
    }

    #[test]
    fn disk_pair_phantom_yields_exactly_the_disks() {
        let img = phantom();
        let ex = extract_thorax(&img);
        assert!(ex.found);
        assert_eq!(ex.mask, oracle_lungs());
        assert_eq!(ex.bbox, oracle_lungs().bbox().unwrap());
        assert_eq!(ex.cropped.height(), ex.bbox.height);
        for (r, c) in [(0, 0), (32, 32), (63, 10)] {
            assert!(!ex.mask.get(r, c));
        }
    }

    #[test]
    fn all_white_is_not_found() {
        let ex = extract_thorax(&GrayImage::filled(16, 16, 1.0));
        assert!(!ex.found);
        assert_eq!(ex.mask.count(), 256);
    }

    #[test]
    fn uniform_gray_is_not_found() {
        let ex = extract_thorax(&GrayImage::filled(16, 16, 0.5));
        assert!(!ex.found);
        assert_eq!(ex.threshold_bin, None);
    }

    #[test]
    fn only_border_touching_dark_region_falls_back() {
        let img = GrayImage::from_fn(20, 20, |_, c| if c < 5 { 0.0 } else { 0.9 });
        let ex = extract_thorax(&img);
        assert!(!ex.found);
        assert!(ex.threshold_bin.is_some());
    }

    #[test]
    fn mask_is_below_threshold_and_off_border() {
        let img = phantom();
        let ex = extract_thorax(&img);
        let t = ex.threshold_bin.unwrap();
        for r in 0..64 {
            for c in 0..64 {
                if ex.mask.get(r, c) {
                    assert!(intensity_bin(img.get(r, c)) <= t);
                    assert!(r > 0 && c > 0 && r < 63 && c < 63);
                }
            }
        }
    }
}
