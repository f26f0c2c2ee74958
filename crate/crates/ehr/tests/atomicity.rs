mod common;

use std::sync::{Arc, Mutex};

use ctdx_core::pipeline::{PipelineConfig, Stage};
use ctdx_core::Formulary;
use ctdx_ehr::{EhrService, FaultPoint, ServiceError, Store};

use common::*;

fn service_with_fault(dir: &std::path::Path, fault: Arc<Mutex<Option<FaultPoint>>>) -> EhrService {
    EhrService::new(
        Store::open(dir).unwrap(),
        Some(untrained_model()),
        PipelineConfig::default(),
        Formulary::open(),
    )
    .with_fault_hook(Arc::new(move |at| {
        if *fault.lock().unwrap() == Some(at) {
            Err(format!("injected at {at:?}"))
        } else {
            Ok(())
        }
    }))
}

#[test]
fn failed_ingest_leaves_store_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fault = Arc::new(Mutex::new(None));
    let svc = service_with_fault(dir.path(), fault.clone());
    let id = svc.register_patient(new_patient(Some("MRN-1")), "test").unwrap().patient_id;
    let scans = visits(&id, 2, 21);
    svc.ingest_and_diagnose(&id, &scans[0], "test").unwrap();

    let before = tree_bytes(dir.path());
    let snapshot = svc.get_patient(&id).unwrap();
    let points: Vec<FaultPoint> = Stage::ALL
        .iter()
        .map(|&s| FaultPoint::Stage(s))
        .chain([FaultPoint::Persist])
        .collect();
    for at in points {
        *fault.lock().unwrap() = Some(at);
        let err = svc.ingest_and_diagnose(&id, &scans[1], "test").unwrap_err();
        match at {
            FaultPoint::Stage(stage) => assert_eq!(err.stage(), Some(stage), "{err}"),
            FaultPoint::Persist => assert!(matches!(err, ServiceError::Storage(_)), "{err}"),
        }
        assert_eq!(tree_bytes(dir.path()), before, "store changed after fault at {at:?}");
        assert_eq!(svc.get_patient(&id).unwrap(), snapshot);
    }

    *fault.lock().unwrap() = None;
    svc.ingest_and_diagnose(&id, &scans[1], "test").unwrap();
    let rec = svc.get_patient(&id).unwrap();
    assert_eq!(rec.diagnoses.len(), 2);
    assert_eq!(rec.audit.len(), 3);

    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.get(&id).unwrap(), rec);
}

#[test]
fn invalid_scan_fails_in_validation_stage() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service_with_fault(dir.path(), Arc::new(Mutex::new(None)));
    let id = svc.register_patient(new_patient(None), "test").unwrap().patient_id;
    let mut scan = visits(&id, 1, 3).remove(0);
    scan.slices.clear();
    let before = tree_bytes(dir.path());
    let err = svc.ingest_and_diagnose(&id, &scan, "test").unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Validation));
    assert_eq!(tree_bytes(dir.path()), before);
}

#[test]
fn out_of_order_ingest_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service_with_fault(dir.path(), Arc::new(Mutex::new(None)));
    let id = svc.register_patient(new_patient(None), "test").unwrap().patient_id;
    let scans = visits(&id, 2, 8);
    svc.ingest_and_diagnose(&id, &scans[1], "test").unwrap();
    let before = tree_bytes(dir.path());
    let err = svc.ingest_and_diagnose(&id, &scans[0], "test").unwrap_err();
    assert!(err.to_string().contains("non-monotone timeline"), "{err}");
    assert_eq!(tree_bytes(dir.path()), before);
}
