#![no_main]

use std::io::Cursor;

use libfuzzer_sys::fuzz_target;
use opencil::dataset::read_npz;

fuzz_target!(|bytes: &[u8]| {
    let _ = read_npz(Cursor::new(bytes));
});
