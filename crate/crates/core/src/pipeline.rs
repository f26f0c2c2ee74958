//! End-to-end diagnosis of one scan, and ROI dataset assembly for training.
//!
//! Pipeline configuration is TOML; every section is optional:
//!
//! ```toml
//! decision_threshold = 0.5
//! cam_variant = "as_written"   # or "grad_cam"
//! base_model_seed = 0
//!
//! [preprocessing]
//! wiener_window = 5
//! slices_per_scan = 2
//!
//! [segmenter]
//! kind = "baseline"
//! min_area_px = 32
//!
//! [training]
//! max_epochs = 50
//!
//! [split]
//! group_by_patient = true
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{
    classify_segments, scan_decision, Classifier, DiagnosisResult, SegmentInput, Verdict,
    DECISION_THRESHOLD, NO_FINDINGS,
};
use crate::error::{Error, Result};
use crate::preprocess::{to_network_input, PreprocConfig};
use crate::quantification::{quantify_scan, quantify_segment, ActivationModel, CamVariant};
use crate::scan::{validate_scan, CtScan};
use crate::segmentation::{masked_crop, segment_scan_detailed, Segmenter, SegmenterSpec};
use crate::training::{make_splits, Example, SplitConfig, SplitItem, Splits, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocessing: PreprocConfig,
    pub segmenter: SegmenterSpec,
    pub training: TrainConfig,
    pub split: SplitConfig,
    pub decision_threshold: f64,
    pub cam_variant: CamVariant,
    /// Seed of the base network that fine-tuning starts from.
    pub base_model_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocessing: PreprocConfig::default(),
            segmenter: SegmenterSpec::default(),
            training: TrainConfig::default(),
            split: SplitConfig::default(),
            decision_threshold: DECISION_THRESHOLD,
            cam_variant: CamVariant::default(),
            base_model_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocessing.validate()?;
        self.segmenter.validate()?;
        self.training.validate()?;
        self.split.validate()?;
        if !(0.0..1.0).contains(&self.decision_threshold) {
            return Err(Error::InvalidConfig(format!(
                "decision_threshold {} outside [0, 1)",
                self.decision_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validation,
    Preprocessing,
    Segmentation,
    Classification,
    Quantification,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Validation,
        Stage::Preprocessing,
        Stage::Segmentation,
        Stage::Classification,
        Stage::Quantification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Validation => "validation",
            Stage::Preprocessing => "preprocessing",
            Stage::Segmentation => "segmentation",
            Stage::Classification => "classification",
            Stage::Quantification => "quantification",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn at(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    }
}

/// Runs validation, preprocessing, segmentation, classification and
/// quantification on one scan. Errors carry the failing [`Stage`].
pub fn diagnose_scan<M>(scan: &CtScan, model: &M, config: &PipelineConfig) -> Result<DiagnosisResult>
where
    M: Classifier + ActivationModel + Sync,
{
    diagnose_scan_with_hook(scan, model, config, &|_| Ok(()))
}

/// As [`diagnose_scan`], calling `hook` before each stage; a hook error
/// aborts the run and is attributed to that stage.
pub fn diagnose_scan_with_hook<M>(
    scan: &CtScan,
    model: &M,
    config: &PipelineConfig,
    hook: &(dyn Fn(Stage) -> Result<()> + Sync),
) -> Result<DiagnosisResult>
where
    M: Classifier + ActivationModel + Sync,
{
    hook(Stage::Validation).map_err(at(Stage::Validation))?;
    let report = validate_scan(scan);
    if !report.is_valid() {
        let text: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(at(Stage::Validation)(Error::InvalidScan(text.join("; "))));
    }

    hook(Stage::Preprocessing).map_err(at(Stage::Preprocessing))?;
    let segmenter = config.segmenter.build().map_err(at(Stage::Segmentation))?;
    hook(Stage::Segmentation).map_err(at(Stage::Segmentation))?;
    let slices = segment_scan_detailed(scan, &config.preprocessing, &segmenter)
        .map_err(at(Stage::Preprocessing))?;
    let inputs: Vec<SegmentInput> = slices
        .iter()
        .flat_map(|s| {
            s.segments.iter().map(|seg| SegmentInput {
                segment_id: seg.segment_id.clone(),
                crop: masked_crop(&s.filtered, seg),
            })
        })
        .collect();

    hook(Stage::Classification).map_err(at(Stage::Classification))?;
    let mut results = if inputs.is_empty() {
        Vec::new()
    } else {
        classify_segments(model, &inputs, &config.preprocessing).map_err(at(Stage::Classification))?
    };
    let decision = scan_decision(&results, config.decision_threshold);

    hook(Stage::Quantification).map_err(at(Stage::Quantification))?;
    let qs: Vec<Option<f64>> = inputs
        .par_iter()
        .zip(&results)
        .map(|(input, r)| {
            if !r.label.is_positive() {
                return Ok(None);
            }
            let x = to_network_input(&input.crop, &config.preprocessing, None);
            let q = quantify_segment(model, &x, 1, config.cam_variant, Some(r.segment_id.clone()))?;
            Ok(Some(q.q))
        })
        .collect::<Result<_>>()
        .map_err(at(Stage::Quantification))?;
    for (r, q) in results.iter_mut().zip(qs) {
        r.q = q;
    }
    let quantification_q = quantify_scan(&results);

    Ok(DiagnosisResult {
        scan_id: scan.scan_id.clone(),
        patient_id: scan.patient_id.clone(),
        timestamp: scan.acquired_at,
        positive_ratio: decision.positive_ratio,
        scan_label: decision.label,
        decision_threshold: config.decision_threshold,
        quantification_q,
        cam_variant: config.cam_variant,
        annotations: if decision.no_findings {
            vec![NO_FINDINGS.to_string()]
        } else {
            Vec::new()
        },
        segment_results: results,
    })
}

/// Classifier training examples from one scan.
///
/// Positive scans contribute the masked crop of every segment. Healthy
/// scans contribute their segment crops too, or the masked lung field of
/// each selected slice when segmentation finds nothing. Other labels
/// contribute nothing.
pub fn roi_examples(scan: &CtScan, preproc: &PreprocConfig, segmenter: &Segmenter) -> Result<Vec<Example>> {
    let Some(positive) = scan.label.training_target() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for slice in segment_scan_detailed(scan, preproc, segmenter)? {
        if slice.segments.is_empty() {
            if !positive {
                let lung = slice.thorax.cropped.masked(&slice.thorax.cropped_mask());
                out.push(Example {
                    image: lung,
                    positive,
                });
            }
            continue;
        }
        out.extend(slice.segments.iter().map(|seg| Example {
            image: masked_crop(&slice.filtered, seg),
            positive,
        }));
    }
    Ok(out)
}

/// Scan-level split (grouped by patient when configured) with ROI examples
/// for each partition.
#[derive(Debug, Clone)]
pub struct RoiDataset {
    /// Indices into the scan list.
    pub scans: Splits,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn build_roi_dataset(scans: &[CtScan], config: &PipelineConfig) -> Result<RoiDataset> {
    let usable: Vec<usize> = (0..scans.len())
        .filter(|&i| scans[i].label.training_target().is_some())
        .collect();
    let items: Vec<SplitItem> = usable
        .iter()
        .map(|&i| SplitItem {
            class: scans[i].label.to_string(),
            group: Some(scans[i].patient_id.clone()),
        })
        .collect();
    let local = make_splits(&items, &config.split)?;
    let remap = |v: &[usize]| v.iter().map(|&j| usable[j]).collect::<Vec<_>>();
    let split = Splits {
        train: remap(&local.train),
        test: remap(&local.test),
        validation: remap(&local.validation),
    };
    let segmenter = config.segmenter.build()?;
    let examples = |idx: &[usize]| -> Result<Vec<Example>> {
        let per_scan: Vec<Vec<Example>> = idx
            .par_iter()
            .map(|&i| roi_examples(&scans[i], &config.preprocessing, &segmenter))
            .collect::<Result<_>>()?;
        Ok(per_scan.into_iter().flatten().collect())
    };
    Ok(RoiDataset {
        train: examples(&split.train)?,
        validation: examples(&split.validation)?,
        test: examples(&split.test)?,
        scans: split,
    })
}

/// Fraction of scans whose predicted label matches the ground truth, over
/// scans with a binary ground truth.
pub fn scan_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a CtScan, &'a DiagnosisResult)>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (scan, result) in pairs {
        if let Some(truth) = scan.label.training_target() {
            n += 1;
            hit += (truth == (result.scan_label == Verdict::Positive)) as usize;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}
