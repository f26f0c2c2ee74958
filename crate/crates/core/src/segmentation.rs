//! Region-of-interest extraction.
//!
//! Every segmenter turns a lung-cropped slice into pairwise-disjoint lesion
//! masks. Two implementations ship:
//!
//! * `baseline`: pixels inside an intensity band within the lung mask,
//!   grouped into 8-connected components.
//! * `learned`: a serialized per-pixel model loaded from `model_ref`. The
//!   file is JSON:
//!
//!   ```json
//!   {"format": "ctdx-pixel-logistic/v1", "window": 3,
//!    "weights": [w_intensity, w_local_mean, w_local_std],
//!    "bias": b, "threshold": 0.5}
//!   ```
//!
//!   A pixel is a candidate when `sigmoid(w . features + b) >= threshold`,
//!   where the features are the pixel value and the mean and standard
//!   deviation over a `window` x `window` neighbourhood. Candidates are then
//!   grouped exactly as in the baseline. Weights exported from any external
//!   segmentation model can be distilled into this form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};
use crate::preprocess::{extract_thorax, select_slices, wiener_filter, PreprocConfig, ThoraxExtraction};
use crate::scan::{CtScan, RoiSegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Baseline,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSpec {
    pub kind: SegmenterKind,
    pub model_ref: Option<PathBuf>,
    pub min_area_px: usize,
    /// Candidate intensity range (low, high) for the baseline segmenter.
    pub intensity_band: (f64, f64),
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self {
            kind: SegmenterKind::Baseline,
            model_ref: None,
            min_area_px: 32,
            intensity_band: (0.2, 0.75),
        }
    }
}

impl SegmenterSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_band;
        if self.min_area_px < 1 {
            return Err(Error::InvalidConfig("segmenter: min_area_px must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidConfig(
                "segmenter: intensity_band must satisfy 0 <= low < high <= 1".into(),
            ));
        }
        if self.kind == SegmenterKind::Learned && self.model_ref.is_none() {
            return Err(Error::InvalidConfig(
                "segmenter: learned kind needs model_ref".into(),
            ));
        }
        Ok(())
    }

    /// Builds the segmenter this spec describes, loading any model file.
    pub fn build(&self) -> Result<Segmenter> {
        self.validate()?;
        let candidates = match self.kind {
            SegmenterKind::Baseline => Candidates::Band(self.intensity_band),
            SegmenterKind::Learned => {
                let path = self.model_ref.as_deref().expect("validated");
                Candidates::Pixel(PixelModel::load(path)?)
            }
        };
        Ok(Segmenter {
            candidates,
            min_area_px: self.min_area_px,
        })
    }
}

pub const PIXEL_MODEL_FORMAT: &str = "ctdx-pixel-logistic/v1";

/// Per-pixel logistic lesion model; see the module docs for the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelModel {
    pub format: String,
    pub window: usize,
    pub weights: [f64; 3],
    pub bias: f64,
    pub threshold: f64,
}

impl PixelModel {
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let m: PixelModel = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if m.format != PIXEL_MODEL_FORMAT {
            return Err(format!("unsupported format {:?}", m.format));
        }
        if m.window == 0 || m.window % 2 == 0 {
            return Err("window must be odd and positive".into());
        }
        if !m.weights.iter().chain([&m.bias, &m.threshold]).all(|v| v.is_finite()) {
            return Err("parameters must be finite".into());
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ModelLoad {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|message| Error::ModelLoad {
            path: path.to_path_buf(),
            message,
        })
    }

    fn probability_map(&self, image: &GrayImage) -> GrayImage {
        let (h, w) = (image.height() as isize, image.width() as isize);
        let half = (self.window / 2) as isize;
        GrayImage::from_fn(image.height(), image.width(), |r, c| {
            let (mut n, mut s, mut sq) = (0.0, 0.0, 0.0);
            for rr in (r as isize - half).max(0)..=(r as isize + half).min(h - 1) {
                for cc in (c as isize - half).max(0)..=(c as isize + half).min(w - 1) {
                    let v = image.get(rr as usize, cc as usize);
                    n += 1.0;
                    s += v;
                    sq += v * v;
                }
            }
            let mean = s / n;
            let std = (sq / n - mean * mean).max(0.0).sqrt();
            let z = self.weights[0] * image.get(r, c)
                + self.weights[1] * mean
                + self.weights[2] * std
                + self.bias;
            1.0 / (1.0 + (-z).exp())
        })
    }
}

#[derive(Debug, Clone)]
enum Candidates {
    Band((f64, f64)),
    Pixel(PixelModel),
}

/// A ready-to-run segmenter. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Segmenter {
    candidates: Candidates,
    min_area_px: usize,
}

impl Segmenter {
    /// Segments `image` (a lung-cropped slice) within `lung_mask` (whole
    /// image when `None`). Segment ids are `c00`, `c01`, ... by rank; masks
    /// are in the frame of `image`; results are sorted by descending area,
    /// ties in raster order of first pixel.
    pub fn segment(&self, image: &GrayImage, lung_mask: Option<&Mask>) -> Vec<RoiSegment> {
        let (h, w) = (image.height(), image.width());
        if let Some(m) = lung_mask {
            assert_eq!((m.height(), m.width()), (h, w), "lung mask shape");
        }
        let inside = |r: usize, c: usize| lung_mask.is_none_or(|m| m.get(r, c));
        let candidate = match &self.candidates {
            Candidates::Band((lo, hi)) => Mask::from_fn(h, w, |r, c| {
                let v = image.get(r, c);
                inside(r, c) && v >= *lo && v <= *hi
            }),
            Candidates::Pixel(model) => {
                let p = model.probability_map(image);
                Mask::from_fn(h, w, |r, c| inside(r, c) && p.get(r, c) >= model.threshold)
            }
        };
        let labeling = label_components(&candidate);
        let mut kept: Vec<_> = labeling
            .components
            .iter()
            .filter(|c| c.area >= self.min_area_px)
            .collect();
        kept.sort_by(|a, b| b.area.cmp(&a.area).then(a.label.cmp(&b.label)));
        kept.iter()
            .enumerate()
            .filter_map(|(rank, comp)| {
                RoiSegment::from_mask(format!("c{rank:02}"), 0, labeling.mask_of(comp.label))
            })
            .collect()
    }
}

/// Baseline or learned segmentation of one lung-cropped slice.
pub fn segment(image: &GrayImage, lung_mask: Option<&Mask>, spec: &SegmenterSpec) -> Result<Vec<RoiSegment>> {
    Ok(spec.build()?.segment(image, lung_mask))
}

/// Intermediate products for one selected slice.
#[derive(Debug, Clone)]
pub struct SegmentedSlice {
    pub index: usize,
    /// The denoised slice segments refer to.
    pub filtered: GrayImage,
    pub thorax: ThoraxExtraction,
    /// Segments with full-frame masks.
    pub segments: Vec<RoiSegment>,
}

pub fn segment_id(scan_id: &str, slice: usize, rank: usize) -> String {
    let mut s = String::with_capacity(scan_id.len() + 12);
    write!(s, "{scan_id}/s{slice:03}/c{rank:02}").unwrap();
    s
}

/// Slice selection, Wiener filtering, lung extraction and segmentation for
/// every selected slice of `scan`.
pub fn segment_scan_detailed(
    scan: &CtScan,
    preproc: &PreprocConfig,
    segmenter: &Segmenter,
) -> Result<Vec<SegmentedSlice>> {
    let selected = select_slices(scan, preproc.slices_per_scan, preproc.selection_seed);
    selected
        .par_iter()
        .map(|slice| {
            let filtered = wiener_filter(&slice.image, preproc.wiener_window)?;
            let thorax = extract_thorax(&filtered);
            let lung = thorax.cropped_mask();
            let (h, w) = (filtered.height(), filtered.width());
            let segments = segmenter
                .segment(&thorax.cropped, Some(&lung))
                .into_iter()
                .enumerate()
                .filter_map(|(rank, seg)| {
                    let full = seg.mask.embed(h, w, thorax.bbox.row, thorax.bbox.col);
                    RoiSegment::from_mask(segment_id(&scan.scan_id, slice.index, rank), slice.index, full)
                })
                .collect();
            Ok(SegmentedSlice {
                index: slice.index,
                filtered,
                thorax,
                segments,
            })
        })
        .collect()
}

/// All segments of the selected slices, in slice order then rank.
pub fn segment_scan(scan: &CtScan, preproc: &PreprocConfig, spec: &SegmenterSpec) -> Result<Vec<RoiSegment>> {
    let segmenter = spec.build()?;
    Ok(segment_scan_detailed(scan, preproc, &segmenter)?
        .into_iter()
        .flat_map(|s| s.segments)
        .collect())
}

/// The classifier input for a segment: the bounding-box crop of the
/// denoised slice with pixels outside the mask zeroed.
pub fn masked_crop(filtered: &GrayImage, segment: &RoiSegment) -> GrayImage {
    filtered
        .crop(segment.bbox)
        .masked(&segment.mask.crop(segment.bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(img: &mut GrayImage, r0: usize, c0: usize, h: usize, w: usize, v: f64) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                img.set(r, c, v);
            }
        }
    }

    #[test]
    fn air_only_field_has_no_segments() {
        let img = GrayImage::filled(40, 40, 0.0);
        assert!(segment(&img, None, &SegmenterSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn single_in_band_blob() {
        let mut img = GrayImage::filled(40, 40, 0.05);
        blob(&mut img, 10, 12, 10, 10, 0.5);
        let segs = segment(&img, None, &SegmenterSpec::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].area_px, 100);
    }

    #[test]
    fn min_area_filters_small_blobs() {
        let mut img = GrayImage::filled(60, 60, 0.05);
        blob(&mut img, 5, 5, 20, 10, 0.5);
        blob(&mut img, 40, 40, 5, 10, 0.5);
        let spec = SegmenterSpec {
            min_area_px: 100,
            ..Default::default()
        };
        let segs = segment(&img, None, &spec).unwrap();
        assert_eq!(segs.iter().map(|s| s.area_px).collect::<Vec<_>>(), [200]);
    }

    #[test]
    fn lung_mask_limits_candidates() {
        let mut img = GrayImage::filled(40, 40, 0.05);
        blob(&mut img, 10, 10, 10, 10, 0.5);
        let lung = Mask::from_fn(40, 40, |_, c| c >= 15);
        let segs = segment(&img, Some(&lung), &SegmenterSpec::default()).unwrap();
        assert_eq!(segs[0].area_px, 50);
    }

    #[test]
    fn segments_sorted_and_disjoint() {
        let mut img = GrayImage::filled(60, 60, 0.05);
        blob(&mut img, 2, 2, 6, 6, 0.4);
        blob(&mut img, 20, 20, 12, 12, 0.4);
        blob(&mut img, 40, 5, 8, 8, 0.4);
        let spec = SegmenterSpec {
            min_area_px: 1,
            ..Default::default()
        };
        let segs = segment(&img, None, &spec).unwrap();
        let areas: Vec<_> = segs.iter().map(|s| s.area_px).collect();
        assert_eq!(areas, [144, 64, 36]);
        for (i, a) in segs.iter().enumerate() {
            for b in &segs[i + 1..] {
                assert_eq!(a.mask.intersection_count(&b.mask), 0);
            }
        }
    }

    #[test]
    fn learned_model_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"format":"ctdx-pixel-logistic/v1","window":3,"weights":[40.0,0.0,0.0],"bias":-12.0,"threshold":0.5}"#,
        )
        .unwrap();
        let spec = SegmenterSpec {
            kind: SegmenterKind::Learned,
            model_ref: Some(path),
            min_area_px: 1,
            ..Default::default()
        };
        let mut img = GrayImage::filled(30, 30, 0.05);
        blob(&mut img, 5, 5, 4, 4, 0.6);
        let segs = segment(&img, None, &spec).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].area_px, 16);

        let missing = SegmenterSpec {
            model_ref: Some(dir.path().join("nope.json")),
            ..spec.clone()
        };
        assert!(matches!(segment(&img, None, &missing), Err(Error::ModelLoad { .. })));
        std::fs::write(dir.path().join("bad.json"), "{\"format\":\"other\"}").unwrap();
        let bad = SegmenterSpec {
            model_ref: Some(dir.path().join("bad.json")),
            ..spec
        };
        assert!(matches!(segment(&img, None, &bad), Err(Error::ModelLoad { .. })));
    }

    #[test]
    fn spec_validation() {
        let mut s = SegmenterSpec {
            intensity_band: (0.6, 0.4),
            ..Default::default()
        };
        assert!(s.validate().is_err());
        s.intensity_band = (0.25, 0.75);
        s.min_area_px = 0;
        assert!(s.validate().is_err());
    }
}
