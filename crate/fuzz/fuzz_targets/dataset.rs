#![no_main]

//! The three files of a dataset directory, separated by NUL bytes.

use libfuzzer_sys::fuzz_target;
use opencil::dataset::parse_dataset;

fuzz_target!(|text: &str| {
    let mut parts = text.splitn(3, '\0');
    let (Some(f), Some(e), Some(l)) = (parts.next(), parts.next(), parts.next()) else {
        return;
    };
    if let Ok(g) = parse_dataset(f, e, l) {
        assert!(g.edges().iter().all(|&(u, v)| u < g.num_nodes() && v < g.num_nodes() && u != v));
    }
});
