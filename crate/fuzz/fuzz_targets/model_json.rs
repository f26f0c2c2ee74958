#![no_main]

use ctdx_core::nn::ResidualClassifier;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = ResidualClassifier::from_json(text) {
        model.validate().unwrap();
    }
});
