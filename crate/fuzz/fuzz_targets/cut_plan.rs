#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::planner::CutPlan;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(plan) = CutPlan::from_json(text) {
            assert_eq!(CutPlan::from_json(&plan.to_json()).unwrap(), plan);
        }
    }
});
