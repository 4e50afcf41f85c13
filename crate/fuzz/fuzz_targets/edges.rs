#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::dataset::parse_edges;

fuzz_target!(|text: &str| {
    let _ = parse_edges(text);
});
