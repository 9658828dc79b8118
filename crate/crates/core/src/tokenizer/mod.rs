//! WordPiece-style subword vocabulary and sentence-pair encoding.
//!
//! Text is lowercased and split on whitespace and punctuation; each word is
//! then segmented greedily, longest match first, into pieces where every
//! piece after the first carries the `##` prefix.

mod trainer;
mod vocab;

pub use trainer::build_vocab;
pub use vocab::{Vocab, CLS, CONTINUATION, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK};

use crate::error::{Error, Result};

/// Words longer than this many characters encode as a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// An encoded `[CLS] A [SEP] (B [SEP])? [PAD]*` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub ids: Vec<u32>,
    /// 0 up to and including the first `[SEP]`, 1 after it.
    pub segments: Vec<u8>,
    /// 1 on real positions, 0 on padding.
    pub attn_mask: Vec<u8>,
    /// Half-open position ranges, one per (possibly truncated) word.
    pub word_boundaries: Vec<(usize, usize)>,
}

impl TokenizedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn valid_len(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Positions holding word pieces, i.e. neither `[CLS]`, `[SEP]` nor
    /// padding.
    pub fn is_content(&self, pos: usize) -> bool {
        self.attn_mask[pos] == 1 && !matches!(self.ids[pos], CLS | SEP | PAD)
    }

    /// Rebuilds a padded pair from the unpadded `[CLS] … [SEP] (… [SEP])?`
    /// layout. Segments are derived from the first `[SEP]`; word boundaries
    /// are recovered from the `##` continuation markers.
    pub fn from_ids(vocab: &Vocab, ids: &[u32], max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::contract(format!("{} ids exceed max_len {max_len}", ids.len())));
        }
        let mut segments = Vec::with_capacity(max_len);
        let mut seg = 0u8;
        for &id in ids {
            segments.push(seg);
            if id == SEP {
                seg = 1;
            }
        }
        let mut word_boundaries = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            if matches!(id, CLS | SEP | PAD) {
                continue;
            }
            let continues = vocab.token(id).is_some_and(|t| t.starts_with(CONTINUATION));
            match word_boundaries.last_mut() {
                Some((_, end)) if continues && *end == pos => *end = pos + 1,
                _ => word_boundaries.push((pos, pos + 1)),
            }
        }
        let mut out = Self {
            ids: ids.to_vec(),
            segments,
            attn_mask: vec![1; ids.len()],
            word_boundaries,
        };
        out.pad_to(max_len);
        Ok(out)
    }

    fn pad_to(&mut self, max_len: usize) {
        while self.ids.len() < max_len {
            self.ids.push(PAD);
            self.segments.push(0);
            self.attn_mask.push(0);
        }
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits on whitespace, with every punctuation character
/// becoming its own word.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Greedy longest-match-first segmentation of one pre-tokenized word. A word
/// with any unmatchable remainder becomes a single `[UNK]`.
pub fn encode_word(vocab: &Vocab, word: &str) -> Vec<u32> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK];
    }
    let byte_at = |i: usize| if i == chars.len() { word.len() } else { chars[i].0 };
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[byte_at(start)..byte_at(end)]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![UNK],
        }
    }
    pieces
}

/// Word-grouped piece ids of a sentence.
pub fn encode_words(vocab: &Vocab, text: &str) -> Vec<Vec<u32>> {
    pre_tokenize(text)
        .iter()
        .map(|w| encode_word(vocab, w))
        .collect()
}

/// Flat piece ids of a sentence, no special tokens.
pub fn encode_text(vocab: &Vocab, text: &str) -> Vec<u32> {
    encode_words(vocab, text).into_iter().flatten().collect()
}

/// Encodes one sentence or a sentence pair into a `max_len` sequence.
///
/// Overlong input is truncated longest-first: pieces are dropped from the end
/// of whichever sentence is currently longer (sentence B on ties).
pub fn encode_pair(vocab: &Vocab, sentence_a: &str, sentence_b: Option<&str>, max_len: usize) -> Result<TokenizedPair> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len must be at least 3, got {max_len}")));
    }
    let flatten = |words: Vec<Vec<u32>>| -> Vec<(u32, usize)> {
        words
            .into_iter()
            .enumerate()
            .flat_map(|(w, pieces)| pieces.into_iter().map(move |p| (p, w)))
            .collect()
    };
    let mut a = flatten(encode_words(vocab, sentence_a));
    let mut b = sentence_b.map(|s| flatten(encode_words(vocab, s)));
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len - specials;
    loop {
        let b_len = b.as_ref().map_or(0, Vec::len);
        if a.len() + b_len <= budget {
            break;
        }
        match &mut b {
            Some(b) if b.len() >= a.len() => {
                b.pop();
            }
            _ => {
                a.pop();
            }
        }
    }

    let mut out = TokenizedPair {
        ids: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        attn_mask: Vec::with_capacity(max_len),
        word_boundaries: Vec::new(),
    };
    let push = |out: &mut TokenizedPair, id: u32, seg: u8| {
        out.ids.push(id);
        out.segments.push(seg);
        out.attn_mask.push(1);
    };
    let push_sentence = |out: &mut TokenizedPair, pieces: &[(u32, usize)], seg: u8| {
        let mut last_word = None;
        for &(id, word) in pieces {
            let pos = out.ids.len();
            if last_word == Some(word) {
                out.word_boundaries.last_mut().expect("open word").1 = pos + 1;
            } else {
                out.word_boundaries.push((pos, pos + 1));
                last_word = Some(word);
            }
            push(out, id, seg);
        }
        push(out, SEP, seg);
    };
    push(&mut out, CLS, 0);
    push_sentence(&mut out, &a, 0);
    if let Some(b) = &b {
        push_sentence(&mut out, b, 1);
    }
    out.pad_to(max_len);
    Ok(out)
}

/// Joins pieces back into text, skipping `[CLS]`, `[SEP]` and `[PAD]`.
pub fn decode(vocab: &Vocab, ids: &[u32]) -> String {
    let mut out = String::new();
    for &id in ids {
        if matches!(id, CLS | SEP | PAD) {
            continue;
        }
        let token = vocab.token(id).unwrap_or("[UNK]");
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
    }
    out
}
