#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_core::geom::{load_ply, save_ply};

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = load_ply(data) {
        // anything accepted must survive a write and re-read unchanged
        let again = load_ply(save_ply(&cloud).as_bytes()).expect("re-read of written PLY");
        assert_eq!(again.len(), cloud.len());
    }
});
