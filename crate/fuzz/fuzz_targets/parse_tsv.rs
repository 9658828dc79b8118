#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::pipeline::{dataset_to_tsv, parse_tsv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = parse_tsv(text) {
        assert_eq!(d.sentences.len(), d.labels.len());
        let again = parse_tsv(&dataset_to_tsv(&d)).expect("serialized dataset parses");
        assert_eq!(again.labels, d.labels);
    }
});
