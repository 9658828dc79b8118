#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use minibert::tokenizer::{build_vocab, encode_pair, Vocab};

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        build_vocab(
            ["the film opens on a quiet street", "a young director returns home", "naïve café déjà vu"],
            120,
        )
        .unwrap()
    })
}

// Input: max_len byte, then sentence A, optionally a tab and sentence B.
fuzz_target!(|data: &[u8]| {
    let Some((&len, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let (a, b) = match text.split_once('\t') {
        Some((a, b)) => (a, Some(b)),
        None => (text, None),
    };
    if let Ok(pair) = encode_pair(vocab(), a, b, len as usize) {
        assert_eq!(pair.len(), len as usize);
        assert!(pair.valid_len() <= pair.len());
        assert!(pair.ids.iter().all(|&id| (id as usize) < vocab().len()));
    }
});
