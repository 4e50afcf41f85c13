#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::tasks::TaskManifest;

fuzz_target!(|text: &str| {
    if let Ok(m) = TaskManifest::from_json(text) {
        assert_eq!(TaskManifest::from_json(&m.to_json()).unwrap(), m);
    }
});
