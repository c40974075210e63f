#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = densespot::seqdata::parse_label_document(text, "fuzz");
});
