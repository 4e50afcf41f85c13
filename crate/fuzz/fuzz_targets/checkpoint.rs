#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::checkpoint::{parse_checkpoint, write_checkpoint};

fuzz_target!(|text: &str| {
    if let Ok(state) = parse_checkpoint(text) {
        assert_eq!(parse_checkpoint(&write_checkpoint(&state)).unwrap(), state);
    }
});
