//! Scans, slices and segmented regions of interest.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::image::{BBox, GrayImage, Mask};

/// Smallest accepted slice side, in pixels.
pub const MIN_SLICE_SIDE: usize = 8;

/// Ground-truth class of a scan. `Cap` is ingested but never trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    CovidPositive,
    Cap,
    Healthy,
    Unknown,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::CovidPositive,
        Label::Cap,
        Label::Healthy,
        Label::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::CovidPositive => "covid_positive",
            Label::Cap => "cap",
            Label::Healthy => "healthy",
            Label::Unknown => "unknown",
        }
    }

    /// Binary training target: `Some(true)` for COVID-19, `Some(false)` for
    /// healthy, `None` for classes excluded from training.
    pub fn training_target(self) -> Option<bool> {
        match self {
            Label::CovidPositive => Some(true),
            Label::Healthy => Some(false),
            Label::Cap | Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// One cross-sectional image of a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub image: GrayImage,
}

impl Slice {
    pub fn new(index: usize, image: GrayImage) -> Self {
        Self { index, image }
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtScan {
    pub scan_id: String,
    pub patient_id: String,
    pub acquired_at: DateTime<Utc>,
    pub slices: Vec<Slice>,
    pub label: Label,
}

/// A single broken invariant found by [`validate_scan`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyScan,
    /// Slice indices must start at 0 and increase strictly.
    NonIncreasingIndex {
        position: usize,
        previous: Option<usize>,
        index: usize,
    },
    NonFinitePixel {
        slice: usize,
        row: usize,
        col: usize,
    },
    PixelOutOfRange {
        slice: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    Undersized {
        slice: usize,
        height: usize,
        width: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyScan => write!(f, "scan has no slices"),
            Violation::NonIncreasingIndex {
                position,
                previous: Some(p),
                index,
            } => write!(
                f,
                "non-increasing index: slice {position} has index {index} after {p}"
            ),
            Violation::NonIncreasingIndex {
                position, index, ..
            } => write!(
                f,
                "non-increasing index: slice {position} has index {index}, expected 0"
            ),
            Violation::NonFinitePixel { slice, row, col } => {
                write!(f, "non-finite pixel at slice {slice} ({row}, {col})")
            }
            Violation::PixelOutOfRange {
                slice,
                row,
                col,
                value,
            } => write!(
                f,
                "pixel {value} outside [0, 1] at slice {slice} ({row}, {col})"
            ),
            Violation::Undersized {
                slice,
                height,
                width,
            } => write!(f, "slice {slice} is {height}x{width}, below 8x8"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant the scan breaks. Reports at most one pixel
/// violation of each kind per slice to keep reports readable.
pub fn validate_scan(scan: &CtScan) -> ValidationReport {
    let mut violations = Vec::new();
    if scan.slices.is_empty() {
        violations.push(Violation::EmptyScan);
    }
    let mut previous: Option<usize> = None;
    for (position, slice) in scan.slices.iter().enumerate() {
        let ok = match previous {
            None => slice.index == 0,
            Some(p) => slice.index > p,
        };
        if !ok {
            violations.push(Violation::NonIncreasingIndex {
                position,
                previous,
                index: slice.index,
            });
        }
        previous = Some(slice.index);

        if slice.height() < MIN_SLICE_SIDE || slice.width() < MIN_SLICE_SIDE {
            violations.push(Violation::Undersized {
                slice: slice.index,
                height: slice.height(),
                width: slice.width(),
            });
        }
        let w = slice.width();
        let mut seen_nan = false;
        let mut seen_range = false;
        for (i, &v) in slice.image.data().iter().enumerate() {
            if !v.is_finite() {
                if !seen_nan {
                    violations.push(Violation::NonFinitePixel {
                        slice: slice.index,
                        row: i / w,
                        col: i % w,
                    });
                    seen_nan = true;
                }
            } else if !(0.0..=1.0).contains(&v) && !seen_range {
                violations.push(Violation::PixelOutOfRange {
                    slice: slice.index,
                    row: i / w,
                    col: i % w,
                    value: v,
                });
                seen_range = true;
            }
        }
    }
    ValidationReport { violations }
}

/// A segmented region of interest. The mask is in the coordinate frame of
/// the source slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSegment {
    pub segment_id: String,
    pub source_slice: usize,
    pub mask: Mask,
    pub bbox: BBox,
    pub area_px: usize,
}

impl RoiSegment {
    /// Builds a segment whose bbox and area are derived from `mask`.
    /// Returns `None` for an empty mask.
    pub fn from_mask(segment_id: impl Into<String>, source_slice: usize, mask: Mask) -> Option<Self> {
        let bbox = mask.bbox()?;
        let area_px = mask.count();
        Some(Self {
            segment_id: segment_id.into(),
            source_slice,
            mask,
            bbox,
            area_px,
        })
    }
}
