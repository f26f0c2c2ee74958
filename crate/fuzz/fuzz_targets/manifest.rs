#![no_main]

use ctdx_core::manifest::{group_records, parse_manifest_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest_records(text) {
        let n = records.len();
        if let Ok(groups) = group_records(records) {
            assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), n);
        }
    }
});
