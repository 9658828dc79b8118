#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        assert_eq!(c.encode(), data);
        let _ = c.into_model();
    }
});
