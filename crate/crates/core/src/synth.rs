//! Deterministic CT-like phantoms for end-to-end tests.
//!
//! Each slice is a dark background, a bright elliptical thorax and two dark
//! elliptical lung fields. Slices of positive scans carry mid-intensity disk
//! lesions inside the lungs. The phantoms exercise the pipeline's contracts;
//! they make no claim to anatomical or radiological realism.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};
use crate::manifest::{write_manifest, PatientEntry, PatientsFile};
use crate::record::{Demographics, Sex};
use crate::scan::{CtScan, Label, Slice};

pub const BACKGROUND: f64 = 0.02;
pub const TISSUE: f64 = 0.82;
pub const LUNG: f64 = 0.10;
pub const NOISE_SD: f64 = 0.015;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub scans_per_patient: usize,
    pub slices_per_scan: usize,
    /// Square slice side in pixels.
    pub image_size: usize,
    /// Inclusive lesion count range per slice of a positive scan.
    pub lesion_count_range: (usize, usize),
    pub lesion_intensity_band: (f64, f64),
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 20,
            scans_per_patient: 1,
            slices_per_scan: 4,
            image_size: 128,
            lesion_count_range: (1, 3),
            lesion_intensity_band: (0.30, 0.40),
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.n_patients == 0 || self.scans_per_patient == 0 || self.slices_per_scan == 0 {
            return bad("counts must be positive");
        }
        if self.image_size < 64 {
            return bad("image_size must be at least 64");
        }
        let (lo, hi) = self.lesion_count_range;
        if lo == 0 || lo > hi || hi > 4 {
            return bad("lesion_count_range must satisfy 1 <= low <= high <= 4");
        }
        let (a, b) = self.lesion_intensity_band;
        if !(LUNG < a && a <= b && b < TISSUE) {
            return bad("lesion_intensity_band must lie strictly between lung and tissue");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must be in [0, 1]");
        }
        Ok(())
    }
}

/// Ground truth for one generated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTruth {
    pub scan_id: String,
    pub slice_index: usize,
    /// One mask per lesion, pairwise disjoint.
    pub lesions: Vec<Mask>,
}

impl SliceTruth {
    pub fn union(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::new(height, width);
        for l in &self.lesions {
            m.union_with(l);
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub scans: Vec<CtScan>,
    pub truth: Vec<SliceTruth>,
    pub patients: PatientsFile,
}

impl SynthDataset {
    pub fn truth_for(&self, scan_id: &str, slice_index: usize) -> Option<&SliceTruth> {
        self.truth
            .iter()
            .find(|t| t.scan_id == scan_id && t.slice_index == slice_index)
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = ((r - self.cy) / self.ry, (c - self.cx) / self.rx);
        dy * dy + dx * dx <= 1.0
    }
}

struct Lesion {
    cy: f64,
    cx: f64,
    radius: f64,
    intensity: f64,
}

fn place_lesions(
    rng: &mut ChaCha8Rng,
    lungs: &[Ellipse; 2],
    count: usize,
    scale: f64,
    shrink: f64,
    band: (f64, f64),
) -> Vec<Lesion> {
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 10_000 {
        attempts += 1;
        let radius = rng.random_range(4.5..=7.5) * scale * shrink;
        let lung = &lungs[rng.random_range(0..2)];
        let margin = radius + 3.0;
        if lung.ry <= margin || lung.rx <= margin {
            continue;
        }
        let cy = lung.cy + rng.random_range(-1.0..=1.0) * (lung.ry - margin);
        let cx = lung.cx + rng.random_range(-1.0..=1.0) * (lung.rx - margin);
        let inner = Ellipse {
            cy: lung.cy,
            cx: lung.cx,
            ry: lung.ry - margin,
            rx: lung.rx - margin,
        };
        if !inner.contains(cy, cx) {
            continue;
        }
        let clear = out.iter().all(|o| {
            let d = ((o.cy - cy).powi(2) + (o.cx - cx).powi(2)).sqrt();
            d >= o.radius + radius + 3.0
        });
        if clear {
            let intensity = if band.0 < band.1 {
                rng.random_range(band.0..=band.1)
            } else {
                band.0
            };
            out.push(Lesion {
                cy,
                cx,
                radius,
                intensity,
            });
        }
    }
    out
}

fn render_slice(
    rng: &mut ChaCha8Rng,
    size: usize,
    lesions_per_slice: Option<(usize, usize)>,
    shrink: f64,
    band: (f64, f64),
) -> (GrayImage, Vec<Mask>) {
    let s = size as f64;
    let scale = s / 128.0;
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.95..=1.05);
    let body = Ellipse {
        cy: s / 2.0,
        cx: s / 2.0,
        ry: 0.38 * s,
        rx: 0.46 * s,
    };
    let lungs = [-1.0, 1.0].map(|side| Ellipse {
        cy: s / 2.0,
        cx: s / 2.0 + side * 0.2 * s,
        ry: 0.26 * s * jitter(rng),
        rx: 0.14 * s * jitter(rng),
    });
    let lesions = match lesions_per_slice {
        Some((lo, hi)) => {
            let count = rng.random_range(lo..=hi);
            place_lesions(rng, &lungs, count, scale, shrink, band)
        }
        None => Vec::new(),
    };
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let mut masks: Vec<Mask> = lesions.iter().map(|_| Mask::new(size, size)).collect();
    let mut image = GrayImage::filled(size, size, 0.0);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let mut v = if lungs.iter().any(|l| l.contains(y, x)) {
                LUNG
            } else if body.contains(y, x) {
                TISSUE
            } else {
                BACKGROUND
            };
            for (lesion, mask) in lesions.iter().zip(&mut masks) {
                let d2 = (y - lesion.cy).powi(2) + (x - lesion.cx).powi(2);
                if d2 <= lesion.radius * lesion.radius {
                    v = lesion.intensity;
                    mask.set(r, c, true);
                }
            }
            image.set(r, c, (v + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    (image, masks)
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 3, 1, 8, 0, 0).unwrap()
}

pub fn patient_id(ordinal: usize) -> String {
    format!("pat-{ordinal:04}")
}

pub fn scan_id(patient: usize, visit: usize) -> String {
    format!("scan-{patient:04}-{visit:02}")
}

/// Generates the dataset described by `spec`. Identical specs give
/// identical datasets.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = (spec.n_patients as f64 * spec.positive_fraction).round() as usize;
    let mut positive = vec![false; spec.n_patients];
    positive[..n_pos].iter_mut().for_each(|p| *p = true);
    positive.shuffle(&mut master);

    let patients = PatientsFile {
        patients: (0..spec.n_patients)
            .map(|i| PatientEntry {
                patient_id: patient_id(i),
                external_id: Some(format!("MRN-{:06}", 100_000 + i)),
                demographics: Demographics {
                    age: master.random_range(30..=85),
                    sex: if master.random_bool(0.5) {
                        Sex::Female
                    } else {
                        Sex::Male
                    },
                },
                prior_history: Vec::new(),
                medications: Vec::new(),
            })
            .collect(),
    };

    let jobs: Vec<(usize, usize)> = (0..spec.n_patients)
        .flat_map(|p| (0..spec.scans_per_patient).map(move |v| (p, v)))
        .collect();
    let generated: Vec<(CtScan, Vec<SliceTruth>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(ordinal, &(p, visit))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(ordinal as u64 + 1);
            let is_pos = positive[p];
            let shrink = (1.0 - 0.08 * visit as f64).max(0.75);
            let id = scan_id(p, visit);
            let mut slices = Vec::with_capacity(spec.slices_per_scan);
            let mut truth = Vec::with_capacity(spec.slices_per_scan);
            for index in 0..spec.slices_per_scan {
                let lesions = is_pos.then_some(spec.lesion_count_range);
                let (image, masks) = render_slice(
                    &mut rng,
                    spec.image_size,
                    lesions,
                    shrink,
                    spec.lesion_intensity_band,
                );
                slices.push(Slice::new(index, image));
                truth.push(SliceTruth {
                    scan_id: id.clone(),
                    slice_index: index,
                    lesions: masks,
                });
            }
            let scan = CtScan {
                scan_id: id,
                patient_id: patient_id(p),
                acquired_at: base_time()
                    + Duration::days(2 * visit as i64)
                    + Duration::minutes(p as i64),
                slices,
                label: if is_pos {
                    Label::CovidPositive
                } else {
                    Label::Healthy
                },
            };
            (scan, truth)
        })
        .collect();

    let mut scans = Vec::with_capacity(generated.len());
    let mut truth = Vec::new();
    for (scan, t) in generated {
        scans.push(scan);
        truth.extend(t);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        scans,
        truth,
        patients,
    })
}

/// Writes `manifest.csv`, `images/`, `patients.json`, `synth_spec.json` and
/// one union lesion mask per slice under `ground_truth/` (white = lesion).
pub fn write_dataset(data: &SynthDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let manifest = write_manifest(&data.scans, dir)?;
    let gt = dir.join("ground_truth");
    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
    let size = data.spec.image_size;
    data.truth.par_iter().try_for_each(|t| {
        let path = gt.join(format!("{}_{:03}.png", t.scan_id, t.slice_index));
        let png = t.union(size, size).to_image().encode_png()?;
        fs::write(&path, png).map_err(|e| Error::io(&path, e))
    })?;
    let write_json = |name: &str, value: &dyn erased::Json| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, value.to_json()?).map_err(|e| Error::io(&path, e))
    };
    write_json("patients.json", &data.patients)?;
    write_json("synth_spec.json", &data.spec)?;
    Ok(manifest)
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> crate::Result<String>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> crate::Result<String> {
            Ok(serde_json::to_string_pretty(self)?)
        }
    }
}

/// Two-class image set for classifier checks: dark noisy fields, and the
/// same with one bright disk. Returns `(image, is_positive)` pairs,
/// alternating classes.
pub fn blob_classification_set(n: usize, size: usize, seed: u64) -> Vec<(GrayImage, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let s = size as f64;
            let radius = rng.random_range(0.15..=0.3) * s;
            let cy = rng.random_range(radius..=s - radius);
            let cx = rng.random_range(radius..=s - radius);
            let level = rng.random_range(0.6..=0.9);
            let img = GrayImage::from_fn(size, size, |r, c| {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let v = if positive && d2 <= radius * radius {
                    level
                } else {
                    LUNG
                };
                (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
            });
            (img, positive)
        })
        .collect()
}
