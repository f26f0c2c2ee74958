//! Dataset manifests and the companion patients file.
//!
//! A manifest is a CSV file with one record per slice image:
//!
//! ```text
//! scan_id,patient_id,acquired_at,slice_index,label,image_path
//! s-0001,p-0001,2020-03-01T08:00:00Z,0,covid_positive,images/s-0001_000.png
//! ```
//!
//! `acquired_at` is ISO-8601 (RFC 3339, or a bare date / naive date-time read
//! as UTC). `label` is one of `covid_positive`, `cap`, `healthy`, `unknown`.
//! `image_path` is relative to the manifest's directory and must name an
//! 8-bit grayscale PNG of at least 8x8 pixels. Lines starting with `#` are
//! comments. Records of one scan must agree on patient, timestamp and label,
//! and their slice indices must be exactly `0..n`.
//!
//! The patients file is JSON:
//!
//! ```json
//! {"patients": [{"patient_id": "p-0001", "external_id": "MRN-1",
//!   "demographics": {"age": 61, "sex": "female"},
//!   "prior_history": ["hypertension"],
//!   "medications": [{"name": "remdesivir", "start": "2020-03-02T00:00:00Z",
//!                    "end": null, "dosage_note": "200 mg day 1"}]}]}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ManifestError, Result};
use crate::image::{decode_png_gray, GrayImage};
use crate::record::{Demographics, Formulary, MedicationEvent};
use crate::scan::{CtScan, Label, Slice, MIN_SLICE_SIDE};

pub const MANIFEST_FIELDS: [&str; 6] = [
    "scan_id",
    "patient_id",
    "acquired_at",
    "slice_index",
    "label",
    "image_path",
];

/// Where manifest image paths are resolved.
pub trait ImageSource: Sync {
    fn read(&self, path: &str) -> std::io::Result<Vec<u8>>;
}

/// Resolves image paths relative to a directory.
pub struct DirSource(pub PathBuf);

impl ImageSource for DirSource {
    fn read(&self, path: &str) -> std::io::Result<Vec<u8>> {
        fs::read(self.0.join(path))
    }
}

/// In-memory images keyed by path, e.g. parts of an uploaded form.
#[derive(Default)]
pub struct MemorySource(pub HashMap<String, Vec<u8>>);

impl ImageSource for MemorySource {
    fn read(&self, path: &str) -> std::io::Result<Vec<u8>> {
        self.0
            .get(path)
            .cloned()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, path.to_string()))
    }
}

/// One parsed manifest line, before its image is loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub line: u64,
    pub scan_id: String,
    pub patient_id: String,
    pub acquired_at: DateTime<Utc>,
    pub slice_index: usize,
    pub label: Label,
    pub image_path: String,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(t.and_utc());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

fn manifest_err(line: u64, kind: ManifestError) -> Error {
    Error::Manifest { line, kind }
}

/// Parses manifest text into records without touching any image.
pub fn parse_manifest_records(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| manifest_err(1, ManifestError::Malformed(e.to_string())))?
        .clone();
    if !headers.is_empty() && headers.iter().ne(MANIFEST_FIELDS) {
        return Err(manifest_err(
            1,
            ManifestError::Malformed(format!(
                "header must be {}",
                MANIFEST_FIELDS.join(",")
            )),
        ));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            manifest_err(line, ManifestError::Malformed(e.to_string()))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let malformed = |msg: String| manifest_err(line, ManifestError::Malformed(msg));
        let field = |i: usize| row.get(i).unwrap_or_default();

        for (i, name) in [(0, "scan_id"), (1, "patient_id"), (5, "image_path")] {
            if field(i).is_empty() {
                return Err(malformed(format!("{name} is empty")));
            }
        }
        let acquired_at = parse_timestamp(field(2))
            .ok_or_else(|| malformed(format!("acquired_at {:?} is not ISO-8601", field(2))))?;
        let slice_index = field(3)
            .parse::<usize>()
            .map_err(|_| malformed(format!("slice_index {:?} is not a nonnegative integer", field(3))))?;
        let label = field(4)
            .parse::<Label>()
            .map_err(|bad| manifest_err(line, ManifestError::Taxonomy(bad)))?;

        records.push(ManifestRecord {
            line,
            scan_id: field(0).to_string(),
            patient_id: field(1).to_string(),
            acquired_at,
            slice_index,
            label,
            image_path: field(5).to_string(),
        });
    }
    Ok(records)
}

/// Groups records by scan (in order of first appearance) and checks the
/// per-scan consistency rules. Returns, per scan, its records sorted by
/// slice index.
pub fn group_records(records: Vec<ManifestRecord>) -> Result<Vec<Vec<ManifestRecord>>> {
    let mut order: Vec<Vec<ManifestRecord>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for rec in records {
        match by_id.get(&rec.scan_id) {
            Some(&i) => {
                let first = &order[i][0];
                if first.patient_id != rec.patient_id
                    || first.acquired_at != rec.acquired_at
                    || first.label != rec.label
                {
                    return Err(manifest_err(
                        rec.line,
                        ManifestError::Malformed(format!(
                            "scan {} disagrees with line {} on patient, time or label",
                            rec.scan_id, first.line
                        )),
                    ));
                }
                order[i].push(rec);
            }
            None => {
                by_id.insert(rec.scan_id.clone(), order.len());
                order.push(vec![rec]);
            }
        }
    }
    for group in &mut order {
        group.sort_by_key(|r| r.slice_index);
        for (expected, rec) in group.iter().enumerate() {
            if rec.slice_index != expected {
                return Err(manifest_err(
                    rec.line,
                    ManifestError::Malformed(format!(
                        "scan {} slice indices must be 0..{} without gaps or repeats; found {}",
                        rec.scan_id,
                        group.len(),
                        rec.slice_index
                    )),
                ));
            }
        }
    }
    Ok(order)
}

fn load_slice(rec: &ManifestRecord, source: &dyn ImageSource) -> Result<Slice> {
    let image_err = |message: String| {
        manifest_err(
            rec.line,
            ManifestError::Image {
                path: rec.image_path.clone(),
                message,
            },
        )
    };
    let bytes = source
        .read(&rec.image_path)
        .map_err(|e| image_err(e.to_string()))?;
    let image: GrayImage = decode_png_gray(&bytes).map_err(|e| image_err(e.to_string()))?;
    if image.height() < MIN_SLICE_SIDE || image.width() < MIN_SLICE_SIDE {
        return Err(manifest_err(
            rec.line,
            ManifestError::Undersized {
                path: rec.image_path.clone(),
                height: image.height(),
                width: image.width(),
            },
        ));
    }
    Ok(Slice::new(rec.slice_index, image))
}

/// Parses a manifest and loads every referenced image through `source`.
///
/// Images are decoded in parallel; the result keeps manifest order, and the
/// reported error is the one with the smallest line number.
pub fn parse_manifest(text: &str, source: &dyn ImageSource) -> Result<Vec<CtScan>> {
    let groups = group_records(parse_manifest_records(text)?)?;
    let flat: Vec<&ManifestRecord> = groups.iter().flatten().collect();
    let loaded: Vec<Result<Slice>> = flat.par_iter().map(|r| load_slice(r, source)).collect();

    let mut first_err: Option<(u64, Error)> = None;
    let mut ok = Vec::with_capacity(loaded.len());
    for (rec, res) in flat.iter().zip(loaded) {
        match res {
            Ok(slice) => ok.push(slice),
            Err(e) => {
                if first_err.as_ref().is_none_or(|(line, _)| rec.line < *line) {
                    first_err = Some((rec.line, e));
                }
            }
        }
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }

    let mut slices = ok.into_iter();
    Ok(groups
        .iter()
        .map(|group| {
            let first = &group[0];
            CtScan {
                scan_id: first.scan_id.clone(),
                patient_id: first.patient_id.clone(),
                acquired_at: first.acquired_at,
                label: first.label,
                slices: slices.by_ref().take(group.len()).collect(),
            }
        })
        .collect())
}

/// Reads a manifest file; image paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CtScan>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    parse_manifest(&text, &DirSource(base))
}

/// Relative image path used by [`write_manifest`] for a slice.
pub fn image_path_for(scan_id: &str, slice_index: usize) -> String {
    format!("images/{scan_id}_{slice_index:03}.png")
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Renders manifest text for `scans` using [`image_path_for`] paths.
pub fn manifest_text(scans: &[CtScan]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_FIELDS).unwrap();
    for scan in scans {
        for slice in &scan.slices {
            w.write_record([
                scan.scan_id.as_str(),
                scan.patient_id.as_str(),
                &format_timestamp(&scan.acquired_at),
                &slice.index.to_string(),
                scan.label.as_str(),
                &image_path_for(&scan.scan_id, slice.index),
            ])
            .unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Writes `dir/manifest.csv` plus one PNG per slice under `dir/images/`.
/// Intensities are quantized to 8 bits.
pub fn write_manifest(scans: &[CtScan], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    scans
        .par_iter()
        .flat_map(|scan| scan.slices.par_iter().map(move |s| (scan, s)))
        .try_for_each(|(scan, slice)| {
            let path = dir.join(image_path_for(&scan.scan_id, slice.index));
            let png = slice.image.encode_png()?;
            fs::write(&path, png).map_err(|e| Error::io(&path, e))
        })?;
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, manifest_text(scans)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    #[serde(default)]
    pub external_id: Option<String>,
    pub demographics: Demographics,
    #[serde(default)]
    pub prior_history: Vec<String>,
    #[serde(default)]
    pub medications: Vec<MedicationEvent>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientsFile {
    pub patients: Vec<PatientEntry>,
}

/// Parses and validates a patients file: unique ids, valid medication
/// events. Medications are returned sorted by start.
pub fn parse_patients(text: &str, formulary: &Formulary) -> Result<PatientsFile> {
    let mut file: PatientsFile =
        serde_json::from_str(text).map_err(|e| Error::Patients(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    for p in &mut file.patients {
        if p.patient_id.is_empty() {
            return Err(Error::Patients("empty patient_id".into()));
        }
        if !seen.insert(p.patient_id.clone()) {
            return Err(Error::Patients(format!(
                "duplicate patient_id {}",
                p.patient_id
            )));
        }
        for m in &p.medications {
            m.validate(formulary)
                .map_err(|e| Error::Patients(format!("{}: {e}", p.patient_id)))?;
        }
        p.medications.sort_by_key(|m| m.start);
    }
    Ok(file)
}

pub fn load_patients(path: impl AsRef<Path>, formulary: &Formulary) -> Result<PatientsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_patients(&text, formulary)
}
