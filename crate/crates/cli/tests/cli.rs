use std::path::Path;
use std::process::{Command, Output};

fn pipeline(args: &[&str], store: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pipeline"))
        .args(args)
        .env("STORE_DIR", store)
        .env_remove("MODEL_PATH")
        .env_remove("API_TOKEN")
        .output()
        .unwrap();
    out
}

fn ok(args: &[&str], store: &Path) -> String {
    let out = pipeline(args, store);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_train_ingest_timeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let store = tmp.path().join("store");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "[training]\nmax_epochs = 2\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    ok(
        &["synth-data", "--out", &s(&data), "--patients", "12", "--seed", "4", "--scans-per-patient", "2", "--image-size", "96"],
        &store,
    );
    assert!(data.join("manifest.csv").exists());
    assert!(data.join("patients.json").exists());

    let report: serde_json::Value = serde_json::from_str(
        ok(&["train", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&run)], &store).trim(),
    )
    .unwrap();
    assert_eq!(report["block"], "FC");
    assert!(report["epochs"].as_u64().unwrap() <= 2);
    let model = run.join("model.json");
    assert!(model.exists() && run.join("metrics.jsonl").exists());

    let lines = ok(
        &["diagnose", "--scan-dir", &s(&data), "--patient", "pat-0000", "--model", &s(&model)],
        &store,
    );
    assert_eq!(lines.lines().count(), 2);
    for l in lines.lines() {
        ctdx_core::diagnosis::DiagnosisResult::from_json(l).unwrap();
    }

    let rec: serde_json::Value =
        serde_json::from_str(&ok(&["register", "--age", "58", "--sex", "Female", "--external-id", "MRN-9"], &store)).unwrap();
    let id = rec["patient_id"].as_str().unwrap().to_string();
    let dup = pipeline(&["register", "--age", "58", "--external-id", "MRN-9"], &store);
    assert!(!dup.status.success());
    assert!(String::from_utf8_lossy(&dup.stderr).contains("conflict"));

    let ingested = ok(
        &["ingest", "--patient", &id, "--from", "pat-0000", "--scan-dir", &s(&data), "--model", &s(&model)],
        &store,
    );
    assert_eq!(ingested.lines().count(), 2);
    // A second pass repeats scan ids and must be refused.
    assert!(!pipeline(
        &["ingest", "--patient", &id, "--from", "pat-0000", "--scan-dir", &s(&data), "--model", &s(&model)],
        &store
    )
    .status
    .success());

    ok(&["add-medication", "--patient", &id, "--name", "remdesivir", "--start", "2020-03-02"], &store);
    let bad = pipeline(
        &["add-medication", "--patient", &id, "--name", "x", "--start", "2020-03-05", "--end", "2020-03-01"],
        &store,
    );
    assert!(!bad.status.success());

    let png = tmp.path().join("timeline.png");
    let view: serde_json::Value = serde_json::from_str(&ok(
        &["timeline", "--patient", &id, "--forecast", "3", "--plot", &s(&png)],
        &store,
    ))
    .unwrap();
    assert_eq!(view["patient_id"], id.as_str());
    assert_eq!(view["medications"].as_array().unwrap().len(), 1);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (800, 400));

    let queue: serde_json::Value = serde_json::from_str(&ok(&["triage"], &store)).unwrap();
    assert_eq!(queue.as_array().unwrap().len(), 1);
}

#[test]
fn serve_requires_a_token_and_bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pipeline(&["serve", "--port", "0"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--token"));

    let out = pipeline(&["timeline", "--patient", "p-000404"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let out = pipeline(&["register", "--age", "40", "--sex", "robot"], tmp.path());
    assert!(!out.status.success());
}
