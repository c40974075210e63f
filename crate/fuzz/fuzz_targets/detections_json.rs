#![no_main]

use densespot::postproc::{encode_detection_list, parse_detection_list};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(recs) = parse_detection_list(text) {
        let again =
            parse_detection_list(&encode_detection_list(&recs)).expect("re-encoded list parses");
        assert_eq!(again.len(), recs.len());
    }
});
