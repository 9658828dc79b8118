#![no_main]

use libfuzzer_sys::fuzz_target;
use minibert::tokenizer::Vocab;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocab::parse(text) {
        let again = Vocab::parse(&v.to_file_string()).expect("serialized vocab parses");
        assert_eq!(again.tokens(), v.tokens());
    }
});
