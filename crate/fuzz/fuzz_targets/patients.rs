#![no_main]

use ctdx_core::manifest::parse_patients;
use ctdx_core::Formulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_patients(text, &Formulary::open()) {
        for p in &file.patients {
            assert!(p.medications.windows(2).all(|w| w[0].start <= w[1].start));
        }
    }
});
