#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::engine::RunReport;

fuzz_target!(|text: &str| {
    if let Ok(r) = RunReport::from_json(text) {
        assert!(r.tasks.iter().all(|t| t.oscr <= t.closed_acc));
    }
});
