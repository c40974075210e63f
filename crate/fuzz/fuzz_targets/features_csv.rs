#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(x) = densespot::seqdata::parse_feature_csv(text) {
        assert!(x.nrows() == 0 || x.ncols() > 0);
    }
});
