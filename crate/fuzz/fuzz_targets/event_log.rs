#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_core::session::parse_event_log;

fuzz_target!(|text: &str| {
    let _ = parse_event_log(text);
});
