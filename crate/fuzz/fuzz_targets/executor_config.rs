#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::executor::ExecutorConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = ExecutorConfig::from_json(text) {
            config.validate().unwrap();
        }
    }
});
