#![no_main]

use densespot::seqdata::{decode_feature_bin, encode_feature_bin};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(x) = decode_feature_bin(data) {
        if x.iter().all(|v| !v.is_nan()) {
            assert_eq!(encode_feature_bin(&x), data);
        }
    }
});
