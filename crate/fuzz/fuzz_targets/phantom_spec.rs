#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::phantom::PhantomSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = PhantomSpec::from_json(text) {
            assert_eq!(PhantomSpec::from_json(&spec.to_json()).unwrap(), spec);
        }
    }
});
