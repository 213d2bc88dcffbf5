#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::executor::{parse_events, RunRecord};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(events) = parse_events(text) {
            let _ = RunRecord::from_events(None, events);
        }
    }
});
