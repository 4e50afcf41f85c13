#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::dataset::parse_features;

fuzz_target!(|text: &str| {
    if let Ok(x) = parse_features(text) {
        assert!(x.iter().all(|v| v.is_finite()));
    }
});
