//! Regenerates `data/sentiment.tsv`: sentences of neutral words from the toy
//! corpus with a few polarity words mixed in. The label is 1 exactly when
//! positive words outnumber negative ones, so the two counts separate the
//! classes linearly.
//!
//! cargo run -p minibert --example make_sentiment > crates/core/data/sentiment.tsv

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NEUTRAL: &[&str] = &[
    "the", "film", "story", "cast", "plot", "director", "scene", "camera", "music", "baker", "brother", "street",
    "town", "bread", "shop", "summer", "audience", "acting", "dialogue", "shot", "is", "was", "and", "a", "of",
    "in", "at", "with", "every", "night",
];
const POSITIVE: &[&str] = &["funny", "moving", "brilliant", "honest", "warm", "charming", "wonderful"];
const NEGATIVE: &[&str] = &["dull", "flat", "clumsy", "boring", "tedious", "awful", "slow"];

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    println!("sentence\tlabel");
    for _ in 0..200 {
        let label = rng.gen_bool(0.5);
        let (major, minor) = if label { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
        let n_major = rng.gen_range(1..=3);
        let n_minor = if n_major > 1 && rng.gen_bool(0.3) { 1 } else { 0 };
        let mut words: Vec<&str> = (0..rng.gen_range(5..=9))
            .map(|_| *NEUTRAL.choose(&mut rng).unwrap())
            .collect();
        for _ in 0..n_major {
            words.push(major.choose(&mut rng).unwrap());
        }
        for _ in 0..n_minor {
            words.push(minor.choose(&mut rng).unwrap());
        }
        words.shuffle(&mut rng);
        println!("{}\t{}", words.join(" "), label as u8);
    }
}
