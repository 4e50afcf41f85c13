#![no_main]

use libfuzzer_sys::fuzz_target;
use opencil::config::RunConfigFile;

fuzz_target!(|text: &str| {
    if let Ok(c) = RunConfigFile::parse(text) {
        assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
    }
});
