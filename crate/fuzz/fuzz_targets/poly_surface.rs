#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::surface::PolySurface;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = PolySurface::from_json(text) {
            let d = *s.domain();
            let _ = s.evaluate(0.5 * (d.x_min + d.x_max), 0.5 * (d.y_min + d.y_max));
        }
    }
});
