#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_core::labels::{LabelMap, Provenance};

fuzz_target!(|text: &str| {
    if let Ok(labels) = LabelMap::from_label_file(text, Provenance::Seed) {
        let again = LabelMap::from_label_file(&labels.to_label_file(), Provenance::Seed).unwrap();
        assert_eq!(again, labels);
    }
});
