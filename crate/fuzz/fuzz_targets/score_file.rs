#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::metrics::{auc, threshold_sweep};
use minibert::pipeline::parse_score_file;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((scores, labels)) = parse_score_file(text) {
        assert_eq!(scores.len(), labels.len());
        if let Ok(a) = auc(&scores, &labels) {
            assert!((0.0..=1.0).contains(&a));
        }
        let _ = threshold_sweep(&scores, &labels);
    }
});
