#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_core::nnet::{load_checkpoint, save_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = load_checkpoint(data) {
        // header JSON may be spelled differently, so compare canonical encodings
        let canonical = save_checkpoint(&params);
        assert_eq!(save_checkpoint(&load_checkpoint(&canonical).unwrap()), canonical);
    }
});
