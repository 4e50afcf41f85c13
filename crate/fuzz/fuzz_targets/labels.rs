#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::dataset::parse_labels;

fuzz_target!(|text: &str| {
    if let Ok(labels) = parse_labels(text) {
        assert!(labels.iter().all(|&l| l >= -1));
    }
});
