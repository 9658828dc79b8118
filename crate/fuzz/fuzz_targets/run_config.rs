#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::run_config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::parse(text) {
        assert_eq!(RunConfig::parse(&c.to_file_string()).expect("serialized config parses"), c);
    }
});
