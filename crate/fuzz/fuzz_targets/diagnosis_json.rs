#![no_main]

use ctdx_core::diagnosis::DiagnosisResult;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = DiagnosisResult::from_json(text) {
        let back = DiagnosisResult::from_json(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
});
