#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::pipeline::{parse_feature_rows, parse_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((n, dim, values)) = parse_feature_rows(text) {
        assert_eq!(values.len(), n * dim);
    }
    let _ = parse_labels(text);
});
