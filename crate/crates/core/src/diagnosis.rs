//! Segment classification and the scan-level decision rule.
//!
//! [`DiagnosisResult`] serializes as:
//!
//! ```json
//! {
//!   "scan_id": "scan-0001-00",
//!   "patient_id": "pat-0001",
//!   "timestamp": "2020-03-01T08:01:00Z",
//!   "segment_results": [
//!     {"segment_id": "scan-0001-00/s001/c00", "label": "positive", "probability": 0.97, "Q": 1.8}
//!   ],
//!   "positive_ratio": 1.0,
//!   "scan_label": "positive",
//!   "decision_threshold": 0.5,
//!   "quantification_Q": 1.8,
//!   "cam_variant": "as_written",
//!   "annotations": []
//! }
//! ```
//!
//! `Q` on a segment is present only for segments labeled positive.
//! `annotations` contains `"no-findings"` when segmentation found nothing.

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Tensor3};
use crate::nn::{softmax, ResidualClassifier};
use crate::preprocess::{to_network_input, PreprocConfig};
use crate::quantification::CamVariant;

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const NO_FINDINGS: &str = "no-findings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
}

impl Verdict {
    pub fn is_positive(self) -> bool {
        self == Verdict::Positive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub segment_id: String,
    pub label: Verdict,
    /// Softmax output of the positive class.
    pub probability: f64,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub scan_id: String,
    pub patient_id: String,
    pub timestamp: DateTime<Utc>,
    pub segment_results: Vec<SegmentResult>,
    pub positive_ratio: f64,
    pub scan_label: Verdict,
    pub decision_threshold: f64,
    #[serde(rename = "quantification_Q")]
    pub quantification_q: f64,
    #[serde(default)]
    pub cam_variant: CamVariant,
    #[serde(default)]
    pub annotations: Vec<String>,
}

impl DiagnosisResult {
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Range checks that the type system does not enforce.
    pub fn validate(&self) -> Result<()> {
        let r = self;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("diagnosis result: {m}")));
        if !(0.0..=1.0).contains(&r.positive_ratio) {
            return bad("positive_ratio outside [0, 1]");
        }
        if !(r.quantification_q >= 0.0 && r.quantification_q.is_finite()) {
            return bad("quantification_Q must be finite and nonnegative");
        }
        if r.segment_results
            .iter()
            .any(|s| !(0.0..=1.0).contains(&s.probability))
        {
            return bad("segment probability outside [0, 1]");
        }
        Ok(())
    }
}

/// Anything that maps a network input to class scores.
pub trait Classifier: Sync {
    fn logits(&self, input: &Tensor3) -> Result<Vec<f64>>;
}

impl Classifier for ResidualClassifier {
    fn logits(&self, input: &Tensor3) -> Result<Vec<f64>> {
        ResidualClassifier::logits(self, input)
    }
}

/// A segment's classifier input: the masked bounding-box crop.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub segment_id: String,
    pub crop: GrayImage,
}

/// Classifies each crop; label is the argmax of the two outputs (ties
/// negative), probability the positive-class softmax. Results keep input
/// order.
pub fn classify_segments(
    model: &dyn Classifier,
    segments: &[SegmentInput],
    preproc: &PreprocConfig,
) -> Result<Vec<SegmentResult>> {
    if segments.is_empty() {
        return Err(Error::NoSegments);
    }
    segments
        .par_iter()
        .map(|seg| {
            let logits = model.logits(&to_network_input(&seg.crop, preproc, None))?;
            if logits.len() != 2 {
                return Err(Error::ShapeMismatch {
                    expected: "2 class scores".into(),
                    found: format!("{} class scores", logits.len()),
                });
            }
            let p = softmax(&logits);
            Ok(SegmentResult {
                segment_id: seg.segment_id.clone(),
                label: if logits[1] > logits[0] {
                    Verdict::Positive
                } else {
                    Verdict::Negative
                },
                probability: p[1].clamp(0.0, 1.0),
                q: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanDecision {
    pub label: Verdict,
    pub positive_ratio: f64,
    pub no_findings: bool,
}

/// Scan label from segment counts: positive iff `positives / total`
/// strictly exceeds `threshold`. No segments gives a negative scan flagged
/// as having no findings.
pub fn decide_counts(positives: usize, total: usize, threshold: f64) -> ScanDecision {
    if total == 0 {
        return ScanDecision {
            label: Verdict::Negative,
            positive_ratio: 0.0,
            no_findings: true,
        };
    }
    let ratio = positives as f64 / total as f64;
    ScanDecision {
        label: if ratio > threshold {
            Verdict::Positive
        } else {
            Verdict::Negative
        },
        positive_ratio: ratio,
        no_findings: false,
    }
}

pub fn scan_decision(results: &[SegmentResult], threshold: f64) -> ScanDecision {
    let positives = results.iter().filter(|r| r.label.is_positive()).count();
    decide_counts(positives, results.len(), threshold)
}
