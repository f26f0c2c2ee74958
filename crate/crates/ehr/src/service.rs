//! Record-keeping operations on top of the store and the diagnosis pipeline.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use ctdx_core::diagnosis::DiagnosisResult;
use ctdx_core::nn::ResidualClassifier;
use ctdx_core::pipeline::{diagnose_scan_with_hook, PipelineConfig, Stage};
use ctdx_core::quantification::{correlate_medications, forecast, trend_slope, Baseline, MedicationEffect};
use ctdx_core::{CtScan, Demographics, Formulary, MedicationEvent, PatientRecord, SeverityPoint};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Store, StoreError, StoreRecord};

/// Horizon of the forecast the triage queue ranks by.
pub const TRIAGE_HORIZON_DAYS: u32 = 3;
pub const MAX_AGE: u32 = 150;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("patient {0} not found")]
    NotFound(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("non-monotone timeline: scan at {new} is not after the latest diagnosis at {latest}")]
    NonMonotone {
        new: DateTime<Utc>,
        latest: DateTime<Utc>,
    },
    #[error("diagnosis failed: {source}")]
    Pipeline {
        stage: Option<Stage>,
        #[source]
        source: ctdx_core::Error,
    },
    #[error("no model is loaded")]
    NoModel,
    #[error("storage: {0}")]
    Storage(#[from] StoreError),
}

impl ServiceError {
    /// Pipeline stage a failed ingest is attributed to.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            ServiceError::Pipeline { stage, .. } => *stage,
            _ => None,
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Points where a test can make an operation fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    Stage(Stage),
    /// After the new record file is written, before it replaces the old one.
    Persist,
}

pub type FaultHook = Arc<dyn Fn(FaultPoint) -> std::result::Result<(), String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewPatient {
    #[serde(default)]
    pub external_id: Option<String>,
    pub demographics: Demographics,
    #[serde(default)]
    pub prior_history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestOutcome {
    pub diagnosis: DiagnosisResult,
    /// Absent until the patient has a positive baseline.
    pub severity: Option<SeverityPoint>,
    pub baseline_q: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastStatus {
    NotRequested,
    Ok,
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineView {
    pub patient_id: String,
    pub baseline_q: Option<f64>,
    /// Observed points in time order, followed by forecast points.
    pub points: Vec<SeverityPoint>,
    pub forecast_status: ForecastStatus,
    pub medications: Vec<MedicationEvent>,
    pub medication_effects: Vec<MedicationEffect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrioritySource {
    Forecast,
    Latest,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageEntry {
    pub rank: usize,
    pub patient_id: String,
    pub external_id: Option<String>,
    pub latest_s: Option<f64>,
    pub latest_at: Option<DateTime<Utc>>,
    pub trend_per_day: Option<f64>,
    pub forecast_s: Option<f64>,
    /// The value the queue is sorted by, descending.
    pub priority: Option<f64>,
    pub priority_source: PrioritySource,
}

pub struct EhrService {
    store: Store,
    model: Option<Arc<ResidualClassifier>>,
    pipeline: PipelineConfig,
    formulary: Formulary,
    fault: Option<FaultHook>,
}

fn pipeline_err(e: ctdx_core::Error) -> ServiceError {
    ServiceError::Pipeline {
        stage: e.stage(),
        source: e,
    }
}

impl EhrService {
    pub fn new(store: Store, model: Option<ResidualClassifier>, pipeline: PipelineConfig, formulary: Formulary) -> Self {
        Self {
            store,
            model: model.map(Arc::new),
            pipeline,
            formulary,
            fault: None,
        }
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn has_model(&self) -> bool {
        self.model.is_some()
    }

    fn fault(&self, at: FaultPoint) -> std::result::Result<(), String> {
        self.fault.as_ref().map_or(Ok(()), |f| f(at))
    }

    fn persist_fault(&self) -> impl Fn() -> std::result::Result<(), String> + '_ {
        || self.fault(FaultPoint::Persist)
    }

    fn current(&self, id: &str) -> Result<Arc<StoreRecord>> {
        self.store.get(id).ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn register_patient(&self, req: NewPatient, actor: &str) -> Result<PatientRecord> {
        if req.demographics.age > MAX_AGE {
            return Err(ServiceError::Validation(format!(
                "age {} exceeds {MAX_AGE}",
                req.demographics.age
            )));
        }
        let external_id = match req.external_id.as_deref().map(str::trim) {
            Some("") => return Err(ServiceError::Validation("external_id is empty".into())),
            other => other.map(str::to_string),
        };
        let rec = self
            .store
            .register(
                external_id.as_deref(),
                |id, ordinal| {
                    let mut patient = PatientRecord::new(id, req.demographics.clone());
                    patient.external_id = external_id.clone();
                    patient.prior_history = req.prior_history.clone();
                    let mut rec = StoreRecord {
                        patient,
                        diagnoses: Vec::new(),
                        baseline: Baseline::default(),
                        audit: Vec::new(),
                        registered: ordinal,
                    };
                    rec.push_audit(actor, "register", "");
                    rec
                },
                &self.persist_fault(),
            )
            .map_err(|e| match e {
                StoreError::DuplicateExternalId(_) => ServiceError::Conflict(e.to_string()),
                e => e.into(),
            })?;
        tracing::info!(patient = %rec.patient.patient_id, actor, "registered patient");
        Ok(rec.patient.clone())
    }

    pub fn get_patient(&self, id: &str) -> Result<Arc<StoreRecord>> {
        self.current(id)
    }

    pub fn list_patients(&self) -> Vec<PatientRecord> {
        let snap = self.store.snapshot();
        let mut out: Vec<&Arc<StoreRecord>> = snap.values().collect();
        out.sort_by_key(|r| r.registered);
        out.into_iter().map(|r| r.patient.clone()).collect()
    }

    fn check_admissible(
        rec: &StoreRecord,
        scan_id: &str,
        scan_patient: &str,
        at: DateTime<Utc>,
    ) -> Result<()> {
        if scan_patient != rec.patient.patient_id {
            return Err(ServiceError::Validation(format!(
                "scan belongs to patient {scan_patient}, not {}",
                rec.patient.patient_id
            )));
        }
        if rec.diagnoses.iter().any(|d| d.scan_id == scan_id) {
            return Err(ServiceError::Conflict(format!("scan {scan_id} was already ingested")));
        }
        if let Some(latest) = rec.diagnoses.last().map(|d| d.timestamp) {
            if at <= latest {
                return Err(ServiceError::NonMonotone { new: at, latest });
            }
        }
        Ok(())
    }

    /// Runs the pipeline on `scan` and records the result, its severity and
    /// an audit entry in one write. On any error the store is unchanged.
    pub fn ingest_and_diagnose(&self, patient_id: &str, scan: &CtScan, actor: &str) -> Result<IngestOutcome> {
        let model = self.model.as_ref().ok_or(ServiceError::NoModel)?;
        let writer = self.store.writer(patient_id);
        let _guard = writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.current(patient_id)?;
        Self::check_admissible(&current, &scan.scan_id, &scan.patient_id, scan.acquired_at)?;
        let hook = |stage| {
            self.fault(FaultPoint::Stage(stage))
                .map_err(ctdx_core::Error::Aborted)
        };
        let diagnosis = diagnose_scan_with_hook(scan, model.as_ref(), &self.pipeline, &hook).map_err(|e| {
            tracing::warn!(patient = patient_id, scan = %scan.scan_id, error = %e, "ingest failed");
            pipeline_err(e)
        })?;
        self.commit_diagnosis(&current, diagnosis, actor)
    }

    /// Records a diagnosis computed elsewhere, with the same checks as
    /// [`EhrService::ingest_and_diagnose`].
    pub fn record_diagnosis(&self, diagnosis: DiagnosisResult, actor: &str) -> Result<IngestOutcome> {
        diagnosis
            .validate()
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        let writer = self.store.writer(&diagnosis.patient_id);
        let _guard = writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.current(&diagnosis.patient_id)?;
        Self::check_admissible(&current, &diagnosis.scan_id, &diagnosis.patient_id, diagnosis.timestamp)?;
        self.commit_diagnosis(&current, diagnosis, actor)
    }

    fn commit_diagnosis(&self, current: &StoreRecord, diagnosis: DiagnosisResult, actor: &str) -> Result<IngestOutcome> {
        let mut rec = current.clone();
        let q = diagnosis.quantification_q;
        let (baseline, s) = rec.baseline.observe(q).map_err(pipeline_err)?;
        rec.baseline = baseline;
        let severity = s.map(|s| SeverityPoint::observed(diagnosis.timestamp, q, s, diagnosis.scan_id.clone()));
        rec.patient.timeline.extend(severity.clone());
        rec.patient.diagnoses.push(diagnosis.scan_id.clone());
        rec.diagnoses.push(diagnosis.clone());
        rec.push_audit(actor, "ingest_scan", diagnosis.scan_id.clone());
        self.store.commit(rec, &self.persist_fault())?;
        tracing::info!(patient = %diagnosis.patient_id, scan = %diagnosis.scan_id, q, "recorded diagnosis");
        Ok(IngestOutcome {
            diagnosis,
            severity,
            baseline_q: baseline.q_initial,
        })
    }

    pub fn add_medication(&self, patient_id: &str, event: MedicationEvent, actor: &str) -> Result<PatientRecord> {
        event
            .validate(&self.formulary)
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        let writer = self.store.writer(patient_id);
        let _guard = writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut rec = (*self.current(patient_id)?).clone();
        let detail = event.name.clone();
        rec.patient.insert_medication(event);
        rec.push_audit(actor, "add_medication", detail);
        let rec = self.store.commit(rec, &self.persist_fault())?;
        Ok(rec.patient.clone())
    }

    /// Severity history, optionally extended by a forecast, with the
    /// medication slope summaries. Read-only.
    pub fn get_timeline(&self, patient_id: &str, forecast_days: Option<u32>) -> Result<TimelineView> {
        let rec = self.current(patient_id)?;
        let mut points = rec.patient.timeline.clone();
        let forecast_status = match forecast_days {
            None => ForecastStatus::NotRequested,
            Some(0) => return Err(ServiceError::Validation("forecast horizon must be positive".into())),
            Some(days) => match forecast(&points, days) {
                Ok(f) => {
                    points.extend(f);
                    ForecastStatus::Ok
                }
                Err(ctdx_core::Error::InsufficientPoints { .. }) => ForecastStatus::InsufficientData,
                Err(e) => return Err(ServiceError::Validation(e.to_string())),
            },
        };
        Ok(TimelineView {
            patient_id: rec.patient.patient_id.clone(),
            baseline_q: rec.baseline.q_initial,
            medication_effects: correlate_medications(&rec.patient.timeline, &rec.patient.medications),
            medications: rec.patient.medications.clone(),
            points,
            forecast_status,
        })
    }

    /// Patients ordered by forecast severity [`TRIAGE_HORIZON_DAYS`] ahead,
    /// or latest severity when there is too little history to forecast.
    /// Ties go to the lower patient id; patients without any severity come
    /// last in registration order.
    pub fn triage_queue(&self) -> Vec<TriageEntry> {
        let snap = self.store.snapshot();
        let mut rows: Vec<(u64, TriageEntry)> = snap
            .values()
            .map(|rec| {
                let t = &rec.patient.timeline;
                let latest = t.last();
                let forecast_s = forecast(t, TRIAGE_HORIZON_DAYS)
                    .ok()
                    .and_then(|f| f.last().map(|p| p.s));
                let (priority, priority_source) = match (forecast_s, latest) {
                    (Some(f), _) => (Some(f), PrioritySource::Forecast),
                    (None, Some(p)) => (Some(p.s), PrioritySource::Latest),
                    (None, None) => (None, PrioritySource::None),
                };
                (
                    rec.registered,
                    TriageEntry {
                        rank: 0,
                        patient_id: rec.patient.patient_id.clone(),
                        external_id: rec.patient.external_id.clone(),
                        latest_s: latest.map(|p| p.s),
                        latest_at: latest.map(|p| p.timestamp),
                        trend_per_day: trend_slope(t),
                        forecast_s,
                        priority,
                        priority_source,
                    },
                )
            })
            .collect();
        rows.sort_by(|(ra, a), (rb, b)| match (a.priority, b.priority) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.patient_id.cmp(&b.patient_id)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => ra.cmp(rb),
        });
        rows.into_iter()
            .enumerate()
            .map(|(i, (_, mut e))| {
                e.rank = i + 1;
                e
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use ctdx_core::diagnosis::Verdict;
    use ctdx_core::quantification::CamVariant;
    use ctdx_core::Sex;

    fn day(d: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 2, 1, 9, 0, 0).unwrap() + Duration::days(d)
    }

    fn service(dir: &std::path::Path) -> EhrService {
        EhrService::new(
            Store::open(dir).unwrap(),
            None,
            PipelineConfig::default(),
            Formulary::open(),
        )
    }

    fn new_patient(age: u32) -> NewPatient {
        NewPatient {
            external_id: None,
            demographics: Demographics { age, sex: Sex::Male },
            prior_history: vec![],
        }
    }

    fn diag(patient: &str, scan: &str, d: i64, q: f64) -> DiagnosisResult {
        DiagnosisResult {
            scan_id: scan.into(),
            patient_id: patient.into(),
            timestamp: day(d),
            segment_results: vec![],
            positive_ratio: 0.0,
            scan_label: if q > 0.0 { Verdict::Positive } else { Verdict::Negative },
            decision_threshold: 0.5,
            quantification_q: q,
            cam_variant: CamVariant::AsWritten,
            annotations: vec![],
        }
    }

    #[test]
    fn severity_follows_first_positive_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let p = svc.register_patient(new_patient(40), "t").unwrap().patient_id;
        let out = svc.record_diagnosis(diag(&p, "a", 0, 0.0), "t").unwrap();
        assert_eq!(out.severity, None);
        let out = svc.record_diagnosis(diag(&p, "b", 1, 8.0), "t").unwrap();
        assert_eq!(out.severity.unwrap().s, 100.0);
        let out = svc.record_diagnosis(diag(&p, "c", 2, 2.0), "t").unwrap();
        assert_eq!(out.severity.unwrap().s, 25.0);
        assert_eq!(out.baseline_q, Some(8.0));
        let rec = svc.get_patient(&p).unwrap();
        assert_eq!(rec.patient.diagnoses, ["a", "b", "c"]);
        assert_eq!(rec.audit.len(), 4);
    }

    #[test]
    fn out_of_order_and_duplicate_scans_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let p = svc.register_patient(new_patient(40), "t").unwrap().patient_id;
        svc.record_diagnosis(diag(&p, "a", 5, 1.0), "t").unwrap();
        let err = svc.record_diagnosis(diag(&p, "b", 4, 1.0), "t").unwrap_err();
        assert!(err.to_string().contains("non-monotone timeline"), "{err}");
        assert!(matches!(
            svc.record_diagnosis(diag(&p, "b", 5, 1.0), "t"),
            Err(ServiceError::NonMonotone { .. })
        ));
        assert!(matches!(
            svc.record_diagnosis(diag(&p, "a", 6, 1.0), "t"),
            Err(ServiceError::Conflict(_))
        ));
        assert!(matches!(
            svc.record_diagnosis(diag("p-000099", "z", 6, 1.0), "t"),
            Err(ServiceError::NotFound(_))
        ));
        assert_eq!(svc.get_patient(&p).unwrap().diagnoses.len(), 1);
    }

    #[test]
    fn registration_validation() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        assert!(matches!(
            svc.register_patient(new_patient(151), "t"),
            Err(ServiceError::Validation(_))
        ));
        let mut req = new_patient(30);
        req.external_id = Some("MRN-7".into());
        svc.register_patient(req.clone(), "t").unwrap();
        assert!(matches!(svc.register_patient(req, "t"), Err(ServiceError::Conflict(_))));
        assert!(serde_json::from_str::<NewPatient>(r#"{"demographics": {"sex": "male"}}"#).is_err());
    }

    #[test]
    fn ingest_without_model_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let p = svc.register_patient(new_patient(40), "t").unwrap().patient_id;
        let scan = CtScan {
            scan_id: "s".into(),
            patient_id: p.clone(),
            acquired_at: day(0),
            slices: vec![],
            label: ctdx_core::Label::Unknown,
        };
        assert!(matches!(svc.ingest_and_diagnose(&p, &scan, "t"), Err(ServiceError::NoModel)));
    }

    #[test]
    fn timeline_forecast_and_medications() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let p = svc.register_patient(new_patient(40), "t").unwrap().patient_id;
        svc.record_diagnosis(diag(&p, "a", 0, 10.0), "t").unwrap();
        let view = svc.get_timeline(&p, Some(3)).unwrap();
        assert_eq!(view.forecast_status, ForecastStatus::InsufficientData);
        assert_eq!(view.points.len(), 1);

        svc.record_diagnosis(diag(&p, "b", 1, 8.0), "t").unwrap();
        svc.record_diagnosis(diag(&p, "c", 2, 6.0), "t").unwrap();
        svc.add_medication(
            &p,
            MedicationEvent {
                name: "dexamethasone".into(),
                start: day(1),
                end: None,
                dosage_note: "6 mg".into(),
            },
            "t",
        )
        .unwrap();
        let view = svc.get_timeline(&p, Some(2)).unwrap();
        let s: Vec<f64> = view.points.iter().map(|p| p.s).collect();
        assert_eq!(view.forecast_status, ForecastStatus::Ok);
        assert_eq!(s.len(), 5);
        assert!((s[3] - 40.0).abs() < 1e-9 && (s[4] - 20.0).abs() < 1e-9, "{s:?}");
        assert_eq!(view.medication_effects.len(), 1);
        assert_eq!(
            serde_json::to_value(&view.medication_effects[0]).unwrap()["status"],
            "insufficient-data"
        );
        assert_eq!(svc.get_timeline(&p, Some(2)).unwrap(), view);
        assert!(svc.get_timeline(&p, Some(0)).is_err());
        assert_eq!(svc.get_timeline(&p, None).unwrap().points.len(), 3);
    }

    /// Baseline at day 0 (S = 100), then S = `level` on days 1 to 3.
    fn flat_series(svc: &EhrService, level: f64) -> String {
        let id = svc.register_patient(new_patient(60), "t").unwrap().patient_id;
        svc.record_diagnosis(diag(&id, "b", 0, 10.0), "t").unwrap();
        for d in 1..=3 {
            svc.record_diagnosis(diag(&id, &format!("f{d}"), d, level / 10.0), "t").unwrap();
        }
        id
    }

    #[test]
    fn triage_flat_trends_rank_by_severity() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let ids: Vec<String> = [120.0, 40.0, 90.0].map(|s| flat_series(&svc, s)).into();
        let q = svc.triage_queue();
        let order: Vec<&str> = q.iter().map(|e| e.patient_id.as_str()).collect();
        assert_eq!(order, [&ids[0], &ids[2], &ids[1]]);
        for (e, want) in q.iter().zip([120.0, 90.0, 40.0]) {
            assert_eq!(e.priority_source, PrioritySource::Forecast);
            assert!((e.priority.unwrap() - want).abs() < 1e-9);
            assert!(e.trend_per_day.unwrap().abs() < 1e-9);
            assert!((e.latest_s.unwrap() - want).abs() < 1e-9);
        }
        assert_eq!(q.iter().map(|e| e.rank).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn triage_ties_and_missing_severity() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let none_a = svc.register_patient(new_patient(60), "t").unwrap().patient_id;
        let tie_a = flat_series(&svc, 50.0);
        let tie_b = flat_series(&svc, 50.0);
        let single = svc.register_patient(new_patient(60), "t").unwrap().patient_id;
        svc.record_diagnosis(diag(&single, "only", 0, 3.0), "t").unwrap();
        let none_b = svc.register_patient(new_patient(60), "t").unwrap().patient_id;
        let rising = flat_series(&svc, 10.0);
        svc.record_diagnosis(diag(&rising, "up", 4, 3.0), "t").unwrap();

        let q = svc.triage_queue();
        let order: Vec<&str> = q.iter().map(|e| e.patient_id.as_str()).collect();
        // single: latest S 100. rising: S 10, 10, 30 fits 80/3 + 10x, so 170/3
        // three days on.
        assert_eq!(order, [&single, &rising, &tie_a, &tie_b, &none_a, &none_b]);
        assert_eq!(q[0].priority_source, PrioritySource::Latest);
        assert!((q[1].forecast_s.unwrap() - 170.0 / 3.0).abs() < 1e-9, "{:?}", q[1]);
        assert_eq!(q[4].priority_source, PrioritySource::None);
    }
}
