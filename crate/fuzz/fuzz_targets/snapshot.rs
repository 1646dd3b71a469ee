#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_server::snapshot::{decode_snapshot, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(snapshot) = decode_snapshot(data) {
        let bytes = encode(&snapshot).expect("decoded snapshot re-encodes");
        // NaN positions defeat PartialEq; compare bytes instead
        assert_eq!(encode(&decode_snapshot(&bytes).unwrap()).unwrap(), bytes);
    }
});
