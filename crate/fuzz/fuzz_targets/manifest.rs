#![no_main]

use densespot_cli::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = Manifest::parse(text) {
        assert_eq!(Manifest::parse(&m.encode()).unwrap(), m);
    }
});
