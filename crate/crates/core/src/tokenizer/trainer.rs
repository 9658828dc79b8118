use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::vocab::{Vocab, CONTINUATION, SPECIAL_TOKENS};
use super::pre_tokenize;
use crate::error::{Error, Result};

/// Learns a subword vocabulary of at most `target_size` tokens.
///
/// Starts from the corpus alphabet (word-initial characters plain,
/// word-internal characters `##`-prefixed) and repeatedly merges the most
/// frequent adjacent symbol pair, ties broken by the lexicographically
/// smallest pair, until the vocabulary is full or no pair is left.
pub fn build_vocab<I, S>(corpus: I, target_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for w in pre_tokenize(line.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if lines == 0 || word_counts.is_empty() {
        return Err(Error::input("cannot build a vocabulary from an empty corpus"));
    }

    let mut alphabet = BTreeSet::new();
    for word in word_counts.keys() {
        for (i, c) in word.chars().enumerate() {
            alphabet.insert(if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") });
        }
    }
    let min_size = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size < min_size {
        return Err(Error::input(format!(
            "target size {target_size} is below specials + alphabet ({min_size})"
        )));
    }

    let mut vocab = Vocab::with_specials();
    // Symbol table for merging; ids here are independent of vocab ids.
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_id: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_id.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            symbols.len() as u32 - 1
        })
    };
    for a in &alphabet {
        vocab.push(a)?;
        intern(a.clone(), &mut symbols);
    }

    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &count)| {
            let seq = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let s = if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") };
                    intern(s, &mut symbols)
                })
                .collect();
            (seq, count)
        })
        .collect();

    while vocab.len() < target_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (seq, count) in &words {
            for pair in seq.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_default() += count;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else { break };
        let merged = format!(
            "{}{}",
            symbols[left as usize],
            symbols[right as usize].trim_start_matches(CONTINUATION)
        );
        if !vocab.contains(&merged) {
            vocab.push(&merged)?;
        }
        let merged_id = intern(merged, &mut symbols);
        for (seq, _) in &mut words {
            if seq.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    Ok(vocab)
}
