#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctdx_core::nn::ResidualClassifier;
use ctdx_core::synth::{generate, SynthSpec};
use ctdx_core::{CtScan, Demographics, Sex};
use ctdx_ehr::NewPatient;

pub fn untrained_model() -> ResidualClassifier {
    let mut m = ResidualClassifier::base(5);
    m.replace_head(2, 6);
    m
}

/// Follow-up scans of one synthetic positive patient, reassigned to `patient`.
pub fn visits(patient: &str, n: usize, seed: u64) -> Vec<CtScan> {
    let data = generate(&SynthSpec {
        n_patients: 1,
        scans_per_patient: n,
        slices_per_scan: 2,
        image_size: 96,
        positive_fraction: 1.0,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    data.scans
        .into_iter()
        .map(|mut s| {
            s.patient_id = patient.to_string();
            s
        })
        .collect()
}

pub fn new_patient(external_id: Option<&str>) -> NewPatient {
    NewPatient {
        external_id: external_id.map(str::to_string),
        demographics: Demographics {
            age: 64,
            sex: Sex::Female,
        },
        prior_history: vec!["hypertension".into()],
    }
}

/// Every file under `root` with its bytes.
pub fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
