#![no_main]

use densespot::netcore::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_checkpoint(data) {
        if p.iter().all(|(_, t)| t.iter().all(|v| !v.is_nan())) {
            assert_eq!(encode_checkpoint(&p), data);
        }
    }
});
