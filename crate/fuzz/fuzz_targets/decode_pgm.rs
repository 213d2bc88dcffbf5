#![no_main]

use libfuzzer_sys::fuzz_target;
use resectsim_core::imageio::{decode_pgm, encode_pgm, pgm_to_depth};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        let _ = pgm_to_depth(&img);
    }
});
