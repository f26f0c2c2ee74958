#![no_main]

use ctdx_ehr::StoreRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rec) = serde_json::from_slice::<StoreRecord>(data) {
        let bytes = serde_json::to_vec(&rec).unwrap();
        assert_eq!(serde_json::from_slice::<StoreRecord>(&bytes).unwrap(), rec);
    }
});
