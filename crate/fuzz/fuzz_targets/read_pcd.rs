#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::pcd::{read_pcd_bytes, write_pcd_string};

fuzz_target!(|data: &[u8]| {
    if let Ok((_, cloud)) = read_pcd_bytes(data) {
        // Anything accepted must survive a write and re-read.
        let (_, again) = read_pcd_bytes(write_pcd_string(&cloud).as_bytes()).unwrap();
        assert_eq!(again.len(), cloud.len());
    }
});
