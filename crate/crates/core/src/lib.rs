//! Chest CT diagnosis and prognosis pipeline.
//!
//! The crate covers the full workflow from scan ingestion to treatment
//! assessment: preprocessing and lung-field extraction, lesion segmentation,
//! blockwise fine-tuning of a residual classifier, the scan-level decision
//! rule, activation-based severity quantification, and progression
//! forecasting.

pub mod components;
pub mod diagnosis;
pub mod error;
pub mod image;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod quantification;
pub mod record;
pub mod scan;
pub mod segmentation;
pub mod synth;
pub mod training;

pub use error::{Error, ManifestError, Result};
pub use image::{BBox, GrayImage, Mask, Tensor3};
pub use record::{Demographics, Formulary, MedicationEvent, PatientRecord, SeverityPoint, Sex};
pub use scan::{validate_scan, CtScan, Label, RoiSegment, Slice, ValidationReport, Violation};
