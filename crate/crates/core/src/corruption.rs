//! Training corruptions: BERT token masking, whole-word masking, geometric
//! span masking, denoising deletion/shuffle and replaced-token-detection
//! labels.
//!
//! Every function is a pure function of its inputs and `seed`. Only content
//! positions (not `[CLS]`, `[SEP]` or padding) are ever touched.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::{TokenizedPair, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP};

/// Label of positions that take no part in the reconstruction loss.
pub const IGNORE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Keep,
    Masked,
    Random,
    UnchangedSelected,
    Deleted,
}

impl Action {
    pub fn is_selected(self) -> bool {
        matches!(self, Action::Masked | Action::Random | Action::UnchangedSelected)
    }
}

/// How a selected position is corrupted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRates {
    pub masked: f64,
    pub random: f64,
}

impl MaskRates {
    /// 80% `[MASK]`, 10% random token, 10% left as is.
    pub const BERT: MaskRates = MaskRates {
        masked: 0.8,
        random: 0.1,
    };
    /// Every selected position becomes `[MASK]`.
    pub const ALL_MASK: MaskRates = MaskRates {
        masked: 1.0,
        random: 0.0,
    };

    fn draw(&self, rng: &mut ChaCha8Rng) -> Action {
        let u: f64 = rng.gen();
        if u < self.masked {
            Action::Masked
        } else if u < self.masked + self.random {
            Action::Random
        } else {
            Action::UnchangedSelected
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptionPlan {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<i64>,
    pub actions: Vec<Action>,
    pub rng_seed: u64,
    /// Span masking only: the budget could not be reached.
    pub saturated: bool,
    /// Span masking only: half-open masked spans in sampling order.
    pub spans: Vec<(usize, usize)>,
}

impl CorruptionPlan {
    fn identity(pair: &TokenizedPair, seed: u64) -> Self {
        Self {
            input_ids: pair.ids.clone(),
            labels: vec![IGNORE; pair.len()],
            actions: vec![Action::Keep; pair.len()],
            rng_seed: seed,
            saturated: false,
            spans: Vec::new(),
        }
    }

    pub fn num_selected(&self) -> usize {
        self.actions.iter().filter(|a| a.is_selected()).count()
    }

    fn apply(&mut self, pos: usize, action: Action, original: u32, rng: &mut ChaCha8Rng, vocab: &Vocab) {
        self.actions[pos] = action;
        self.labels[pos] = original as i64;
        self.input_ids[pos] = match action {
            Action::Masked => MASK,
            Action::Random => random_regular_id(rng, vocab),
            _ => original,
        };
    }
}

fn random_regular_id(rng: &mut ChaCha8Rng, vocab: &Vocab) -> u32 {
    NUM_SPECIAL + rng.gen_range(0..vocab.num_regular() as u32)
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must lie in (0, 1), got {rate}")))
    }
}

fn check_vocab(vocab: &Vocab) -> Result<()> {
    if vocab.num_regular() == 0 {
        return Err(Error::input("vocabulary has no regular tokens to draw random replacements from"));
    }
    Ok(())
}

/// Token-level masking with the BERT 80/10/10 law.
pub fn mlm_corrupt(pair: &TokenizedPair, vocab: &Vocab, select_rate: f64, seed: u64) -> Result<CorruptionPlan> {
    mlm_corrupt_with(pair, vocab, select_rate, MaskRates::BERT, seed)
}

/// Token-level masking: every content position is selected independently
/// with probability `select_rate`, then corrupted according to `rates`.
pub fn mlm_corrupt_with(
    pair: &TokenizedPair,
    vocab: &Vocab,
    select_rate: f64,
    rates: MaskRates,
    seed: u64,
) -> Result<CorruptionPlan> {
    check_rate("select_rate", select_rate)?;
    check_vocab(vocab)?;
    let mut rng = seed::rng(seed);
    let mut plan = CorruptionPlan::identity(pair, seed);
    for pos in 0..pair.len() {
        if !pair.is_content(pos) {
            continue;
        }
        if rng.gen::<f64>() < select_rate {
            let action = rates.draw(&mut rng);
            plan.apply(pos, action, pair.ids[pos], &mut rng, vocab);
        }
    }
    Ok(plan)
}

/// Whole-word masking: words are selected as units and every piece of a
/// selected word gets the same action class. With single-piece words this
/// consumes randomness exactly like [`mlm_corrupt`] and yields the same plan.
pub fn wwm_corrupt(pair: &TokenizedPair, vocab: &Vocab, select_rate: f64, seed: u64) -> Result<CorruptionPlan> {
    check_rate("select_rate", select_rate)?;
    check_vocab(vocab)?;
    let mut rng = seed::rng(seed);
    let mut plan = CorruptionPlan::identity(pair, seed);
    for &(start, end) in &pair.word_boundaries {
        if rng.gen::<f64>() < select_rate {
            let action = MaskRates::BERT.draw(&mut rng);
            for pos in start..end {
                plan.apply(pos, action, pair.ids[pos], &mut rng, vocab);
            }
        }
    }
    Ok(plan)
}

/// Span length drawn from a geometric law on `1..=max_span` truncated at
/// `max_span` and renormalized: `P(L = k) ∝ (1 - p)^(k-1) p`.
pub fn sample_span_length(rng: &mut impl Rng, geo_p: f64, max_span: usize) -> usize {
    let total = 1.0 - (1.0 - geo_p).powi(max_span as i32);
    let u: f64 = rng.gen::<f64>() * total;
    let mut cumulative = 0.0;
    let mut weight = geo_p;
    for k in 1..=max_span {
        cumulative += weight;
        if u < cumulative {
            return k;
        }
        weight *= 1.0 - geo_p;
    }
    max_span
}

/// Mean of the truncated geometric law sampled by [`sample_span_length`].
pub fn truncated_geometric_mean(geo_p: f64, max_span: usize) -> f64 {
    let q = 1.0 - geo_p;
    let norm = 1.0 - q.powi(max_span as i32);
    (1..=max_span)
        .map(|k| k as f64 * q.powi(k as i32 - 1) * geo_p)
        .sum::<f64>()
        / norm
}

/// Contiguous span masking. Spans start uniformly at content positions, stop
/// early at the end of their sentence, and a span touching an already
/// masked position is redrawn. Sampling continues until at least
/// `mask_budget` of the content positions are masked; if that cannot be
/// reached within a bounded number of draws the plan is flagged saturated.
pub fn span_corrupt(
    pair: &TokenizedPair,
    vocab: &Vocab,
    mask_budget: f64,
    geo_p: f64,
    max_span: usize,
    seed: u64,
) -> Result<CorruptionPlan> {
    check_rate("mask_budget", mask_budget)?;
    check_rate("geo_p", geo_p)?;
    if max_span == 0 {
        return Err(Error::input("max_span must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let mut plan = CorruptionPlan::identity(pair, seed);
    let eligible: Vec<usize> = (0..pair.len()).filter(|&p| pair.is_content(p)).collect();
    if eligible.is_empty() {
        return Ok(plan);
    }
    let target = mask_budget * eligible.len() as f64;
    let max_attempts = 100 * eligible.len() + 100;
    let mut masked = 0usize;
    let mut attempts = 0usize;
    while (masked as f64) < target {
        if attempts == max_attempts {
            plan.saturated = true;
            break;
        }
        attempts += 1;
        let start = eligible[rng.gen_range(0..eligible.len())];
        let len = sample_span_length(&mut rng, geo_p, max_span);
        let mut end = start;
        while end < start + len && end < pair.len() && pair.is_content(end) {
            end += 1;
        }
        if (start..end).any(|p| plan.actions[p] != Action::Keep) {
            continue;
        }
        for pos in start..end {
            plan.apply(pos, Action::Masked, pair.ids[pos], &mut rng, vocab);
        }
        masked += end - start;
        plan.spans.push((start, end));
    }
    Ok(plan)
}

/// Denoising-autoencoder corruption of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DaeExample {
    /// Re-padded corrupted sequence with recomputed segments and words.
    pub corrupted: TokenizedPair,
    /// The clean input ids, the reconstruction target.
    pub original: Vec<u32>,
    /// Per original position: `Deleted` or `Keep`.
    pub actions: Vec<Action>,
    /// Whether the two sentences changed order.
    pub swapped: bool,
}

/// Deletes each content token independently with probability `delete_rate`
/// and, if `shuffle_sentences`, permutes the two sentences as blocks.
pub fn dae_corrupt(pair: &TokenizedPair, delete_rate: f64, shuffle_sentences: bool, seed: u64) -> Result<DaeExample> {
    if !(0.0..1.0).contains(&delete_rate) {
        return Err(Error::input(format!("delete_rate must lie in [0, 1), got {delete_rate}")));
    }
    let mut rng = seed::rng(seed);
    let mut actions = vec![Action::Keep; pair.len()];
    // Sentence blocks of surviving (position, id) pairs, split at [SEP].
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new()];
    for pos in 0..pair.len() {
        match pair.ids[pos] {
            SEP if pair.attn_mask[pos] == 1 => blocks.push(Vec::new()),
            _ if !pair.is_content(pos) => {}
            _ => {
                if delete_rate > 0.0 && rng.gen::<f64>() < delete_rate {
                    actions[pos] = Action::Deleted;
                } else {
                    blocks.last_mut().expect("non-empty").push(pos);
                }
            }
        }
    }
    blocks.pop();
    let before: Vec<Vec<usize>> = blocks.clone();
    if shuffle_sentences && blocks.len() > 1 {
        blocks.shuffle(&mut rng);
    }
    let swapped = blocks != before;

    let max_len = pair.len();
    let mut corrupted = TokenizedPair {
        ids: vec![CLS],
        segments: vec![0],
        attn_mask: vec![1],
        word_boundaries: Vec::new(),
    };
    for (seg, block) in blocks.iter().enumerate() {
        let mut last_word: Option<usize> = None;
        for &pos in block {
            let at = corrupted.ids.len();
            let word = pair.word_boundaries.iter().position(|&(s, e)| (s..e).contains(&pos));
            match (corrupted.word_boundaries.last_mut(), word) {
                (Some(open), Some(w)) if last_word == Some(w) && open.1 == at => open.1 = at + 1,
                _ => corrupted.word_boundaries.push((at, at + 1)),
            }
            last_word = word;
            corrupted.ids.push(pair.ids[pos]);
            corrupted.segments.push(seg.min(1) as u8);
            corrupted.attn_mask.push(1);
        }
        corrupted.ids.push(SEP);
        corrupted.segments.push(seg.min(1) as u8);
        corrupted.attn_mask.push(1);
    }
    while corrupted.ids.len() < max_len {
        corrupted.ids.push(PAD);
        corrupted.segments.push(0);
        corrupted.attn_mask.push(0);
    }
    Ok(DaeExample {
        corrupted,
        original: pair.ids.clone(),
        actions,
        swapped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RtdLabel {
    Original,
    Replaced,
}

/// Discriminator input for replaced-token detection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RtdExample {
    pub input_ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub attn_mask: Vec<u8>,
    pub rtd_labels: Vec<RtdLabel>,
}

impl RtdExample {
    pub fn replaced_fraction_at(&self, positions: &[usize]) -> f64 {
        let n = positions.iter().filter(|&&p| self.rtd_labels[p] == RtdLabel::Replaced).count();
        n as f64 / positions.len().max(1) as f64
    }
}

/// Fills the `[MASK]` positions of `plan` with generator predictions (one
/// per masked position, in position order) and labels each position
/// `Replaced` exactly where the prediction differs from the original.
pub fn rtd_label(original: &TokenizedPair, plan: &CorruptionPlan, generator_ids: &[u32]) -> Result<RtdExample> {
    let masked: Vec<usize> = (0..plan.actions.len())
        .filter(|&p| plan.actions[p] == Action::Masked)
        .collect();
    if masked.len() != generator_ids.len() {
        return Err(Error::contract(format!(
            "plan has {} masked positions but the generator supplied {} predictions",
            masked.len(),
            generator_ids.len()
        )));
    }
    if plan.input_ids.len() != original.len() {
        return Err(Error::contract("plan and pair lengths differ"));
    }
    let mut input_ids = plan.input_ids.clone();
    let mut rtd_labels = vec![RtdLabel::Original; original.len()];
    for (&pos, &pred) in masked.iter().zip(generator_ids) {
        input_ids[pos] = pred;
        if pred != original.ids[pos] {
            rtd_labels[pos] = RtdLabel::Replaced;
        }
    }
    Ok(RtdExample {
        input_ids,
        segments: original.segments.clone(),
        attn_mask: original.attn_mask.clone(),
        rtd_labels,
    })
}
