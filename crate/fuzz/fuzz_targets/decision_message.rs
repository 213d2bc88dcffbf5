#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::executor::DecisionMessage;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = DecisionMessage::from_json(data) {
        let _ = msg.into_decision(256, 256);
    }
});
