#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::pipeline::LogisticRegression;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = LogisticRegression::parse(text) {
        let again = LogisticRegression::parse(&m.to_text()).expect("serialized model parses");
        assert_eq!(again.weights, m.weights);
        assert_eq!(again.bias, m.bias);
    }
});
