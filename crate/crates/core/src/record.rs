//! Patient-level records: demographics, prescriptions and severity history.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Other,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    /// Years.
    pub age: u32,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationEvent {
    pub name: String,
    pub start: DateTime<Utc>,
    #[serde(default)]
    pub end: Option<DateTime<Utc>>,
    #[serde(default)]
    pub dosage_note: String,
}

impl MedicationEvent {
    pub fn validate(&self, formulary: &Formulary) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidMedication("name is empty".into()));
        }
        if let Some(end) = self.end {
            if end < self.start {
                return Err(Error::InvalidMedication(format!(
                    "{}: end {end} is before start {}",
                    self.name, self.start
                )));
            }
        }
        if !formulary.permits(&self.name) {
            return Err(Error::InvalidMedication(format!(
                "{} is not in the formulary",
                self.name
            )));
        }
        Ok(())
    }
}

/// The set of medication names accepted by the record store. An empty
/// formulary accepts any name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Formulary(Vec<String>);

impl Formulary {
    pub fn open() -> Self {
        Self(Vec::new())
    }

    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(names.into_iter().map(Into::into).collect())
    }

    pub fn permits(&self, name: &str) -> bool {
        self.0.is_empty() || self.0.iter().any(|n| n.eq_ignore_ascii_case(name))
    }
}

/// One point of a severity timeline. Forecast points carry no `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityPoint {
    pub timestamp: DateTime<Utc>,
    #[serde(rename = "Q")]
    pub q: Option<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    pub is_forecast: bool,
    /// Diagnosis this point was derived from; absent for forecasts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
}

impl SeverityPoint {
    pub fn observed(timestamp: DateTime<Utc>, q: f64, s: f64, scan_id: impl Into<String>) -> Self {
        Self {
            timestamp,
            q: Some(q),
            s,
            is_forecast: false,
            scan_id: Some(scan_id.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Hospital identifier (MRN or similar); unique when present.
    #[serde(default)]
    pub external_id: Option<String>,
    pub demographics: Demographics,
    #[serde(default)]
    pub prior_history: Vec<String>,
    #[serde(default)]
    pub medications: Vec<MedicationEvent>,
    #[serde(default)]
    pub timeline: Vec<SeverityPoint>,
    /// Scan ids of the diagnoses recorded for this patient.
    #[serde(default)]
    pub diagnoses: Vec<String>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, demographics: Demographics) -> Self {
        Self {
            patient_id: patient_id.into(),
            external_id: None,
            demographics,
            prior_history: Vec::new(),
            medications: Vec::new(),
            timeline: Vec::new(),
            diagnoses: Vec::new(),
        }
    }

    /// Inserts after any event with the same start, so repeats keep
    /// insertion order.
    pub fn insert_medication(&mut self, event: MedicationEvent) {
        let at = self.medications.partition_point(|m| m.start <= event.start);
        self.medications.insert(at, event);
    }
}
