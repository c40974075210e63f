#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = densespot::evalmap::parse_results_csv(text);
});
