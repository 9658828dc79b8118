//! Pretraining and fine-tuning loops, the plateau learning-rate policy and
//! the epoch log.

mod finetune;
mod lr_policy;
mod pretrain;

pub use finetune::{finetune, format_epoch_log, EpochRecord, FinetuneConfig, EPOCH_LOG_HEADER};
pub use lr_policy::{decision_trace, lr_update, Decision, LrPolicyState};
pub use pretrain::{pretrain, sample_nsp_pair, scheduled_lr, MaskPolicy, PretrainConfig, PretrainOutcome, StepLoss};

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{Batch, Bert};
use crate::tensor::{Scalar, Tape};
use crate::tokenizer::{encode_pair, TokenizedPair, Vocab};

/// Stacks pairs into a batch, dropping the padding columns that every row
/// has in common.
pub fn trimmed_batch<'a>(rows: impl IntoIterator<Item = (&'a [u32], &'a [u8], &'a [u8])> + Clone) -> Result<Batch> {
    trimmed_batch_min(rows, 1)
}

fn trimmed_batch_min<'a>(
    rows: impl IntoIterator<Item = (&'a [u32], &'a [u8], &'a [u8])> + Clone,
    min_width: usize,
) -> Result<Batch> {
    let width = rows
        .clone()
        .into_iter()
        .map(|(_, _, m)| m.iter().rposition(|&x| x == 1).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(1)
        .max(min_width);
    let mut batch = Batch::new(width);
    for (ids, segs, mask) in rows {
        let w = width.min(ids.len());
        batch.push(&ids[..w], &segs[..w], &mask[..w])?;
    }
    Ok(batch)
}

pub(crate) fn pair_batch(pairs: &[TokenizedPair]) -> Result<Batch> {
    pair_batch_min(pairs, 1)
}

pub(crate) fn pair_batch_min(pairs: &[TokenizedPair], min_width: usize) -> Result<Batch> {
    trimmed_batch_min(pairs.iter().map(|p| (&p.ids[..], &p.segments[..], &p.attn_mask[..])), min_width)
}

pub fn encode_sentences(vocab: &Vocab, sentences: &[String], max_len: usize) -> Result<Vec<TokenizedPair>> {
    sentences.iter().map(|s| encode_pair(vocab, s, None, max_len)).collect()
}

/// Runs `f` on fixed-size chunks of `pairs` in parallel and concatenates the
/// results in input order. Chunking does not depend on the thread count, and
/// rows of a batch never interact, so the output is the same however many
/// threads run it.
pub(crate) fn map_chunks<T, R, F>(model: &Bert<T>, pairs: &[TokenizedPair], chunk: usize, f: F) -> Result<Vec<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(&Bert<T>, &mut Tape<T>, &Batch) -> Result<Vec<R>> + Sync,
{
    let parts: Vec<Result<Vec<R>>> = pairs
        .par_chunks(chunk.max(1))
        .map(|c| {
            let batch = pair_batch(c)?;
            let mut tape = Tape::new(0);
            f(model, &mut tape, &batch)
        })
        .collect();
    let mut out = Vec::with_capacity(pairs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Sentiment probabilities in evaluation mode.
pub fn predict_scores<T: Scalar>(model: &Bert<T>, pairs: &[TokenizedPair], chunk: usize) -> Result<Vec<f64>> {
    map_chunks(model, pairs, chunk, |m, tape, batch| {
        let h = m.encode(tape, batch, false)?;
        let s = m.sentiment_score(tape, h)?;
        Ok(tape.value(s).data().iter().map(|v| v.to_f64_lossy()).collect())
    })
}
