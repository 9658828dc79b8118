use rand::seq::SliceRandom;
use rand::Rng;

use super::pair_batch_min;
use crate::corruption::{
    dae_corrupt, mlm_corrupt, mlm_corrupt_with, rtd_label, span_corrupt, wwm_corrupt, Action, CorruptionPlan, MaskRates,
    RtdLabel, IGNORE,
};
use crate::error::{Error, Result};
use crate::model::{masked_mlm_loss, nsp_loss, Bert, ParamGroup};
use crate::seed::{example_seed, mix_seed, rng};
use crate::tensor::{Adam, AdamConfig, Tape, Var};
use crate::tokenizer::{encode_pair, TokenizedPair, Vocab};

/// Corruption applied to pretraining inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPolicy {
    Mlm,
    WholeWord,
    Span { geo_p: f64, max_span: usize },
    /// Token deletion plus optional sentence swap; every content position of
    /// the clean sequence is a reconstruction target.
    Dae { delete_rate: f64, shuffle: bool },
    /// The MLM head acts as generator; its samples fill the masks and the
    /// discriminator head learns which positions were replaced.
    Electra { rtd_weight: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub policy: MaskPolicy,
    pub mask_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_steps` of linear warmup and
    /// then decayed linearly to zero at the last step.
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Batches in the fixed set the loss is measured on before and after.
    pub eval_batches: usize,
    /// Calls the checkpoint hook every this many steps; 0 never does.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            policy: MaskPolicy::Mlm,
            mask_rate: 0.15,
            steps: 500,
            batch_size: 32,
            lr: 1e-2,
            warmup_steps: 50,
            seed: 42,
            max_len: 32,
            eval_batches: 4,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub mlm: f64,
    pub nsp: f64,
    pub rtd: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Bert<f32>,
    pub step_losses: Vec<StepLoss>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// One NSP example: sentence `i` followed by its true successor or, with
/// probability one half, by a random other sentence.
pub fn sample_nsp_pair(rng: &mut impl Rng, n: usize) -> (usize, usize, bool) {
    let a = rng.gen_range(0..n - 1);
    if rng.gen_bool(0.5) {
        return (a, a + 1, true);
    }
    let mut b = rng.gen_range(0..n - 1);
    if b >= a + 1 {
        b += 1;
    }
    (a, b, false)
}

struct Example {
    pair: TokenizedPair,
    is_next: bool,
    seed: u64,
}

fn sample_examples(corpus: &[String], vocab: &Vocab, config: &PretrainConfig, stream: u64, count: usize) -> Result<Vec<Example>> {
    let mut r = rng(mix_seed(&[config.seed, stream]));
    (0..count)
        .map(|slot| {
            let (a, b, is_next) = sample_nsp_pair(&mut r, corpus.len());
            Ok(Example {
                pair: encode_pair(vocab, &corpus[a], Some(&corpus[b]), config.max_len)?,
                is_next,
                seed: example_seed(config.seed, stream, slot as u64),
            })
        })
        .collect()
}

fn plan(pair: &TokenizedPair, vocab: &Vocab, config: &PretrainConfig, seed: u64) -> Result<CorruptionPlan> {
    match config.policy {
        MaskPolicy::Mlm => mlm_corrupt(pair, vocab, config.mask_rate, seed),
        MaskPolicy::WholeWord => wwm_corrupt(pair, vocab, config.mask_rate, seed),
        MaskPolicy::Span { geo_p, max_span } => span_corrupt(pair, vocab, config.mask_rate, geo_p, max_span, seed),
        MaskPolicy::Electra { .. } => mlm_corrupt_with(pair, vocab, config.mask_rate, MaskRates::ALL_MASK, seed),
        MaskPolicy::Dae { .. } => unreachable!("DAE builds its own inputs"),
    }
}

struct Losses {
    total: Var,
    mlm: Var,
    nsp: Var,
    rtd: Option<Var>,
}

/// Builds the combined loss of one batch on `tape`.
fn batch_loss(model: &Bert<f32>, vocab: &Vocab, tape: &mut Tape<f32>, examples: &[Example], config: &PretrainConfig, train: bool) -> Result<Losses> {
    let is_next: Vec<bool> = examples.iter().map(|e| e.is_next).collect();
    let mut inputs = Vec::with_capacity(examples.len());
    let mut labels: Vec<Vec<i64>> = Vec::with_capacity(examples.len());
    let mut plans = Vec::new();
    for e in examples {
        if let MaskPolicy::Dae { delete_rate, shuffle } = config.policy {
            let ex = dae_corrupt(&e.pair, delete_rate, shuffle, e.seed)?;
            labels.push(
                (0..e.pair.len())
                    .map(|p| if e.pair.is_content(p) { e.pair.ids[p] as i64 } else { IGNORE })
                    .collect(),
            );
            inputs.push(ex.corrupted);
        } else {
            let p = plan(&e.pair, vocab, config, e.seed)?;
            let mut input = e.pair.clone();
            input.ids = p.input_ids.clone();
            labels.push(p.labels.clone());
            inputs.push(input);
            plans.push(p);
        }
    }
    // Targets may sit past the end of a shortened DAE input.
    let target_width = labels
        .iter()
        .map(|l| l.iter().rposition(|&x| x != IGNORE).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(1);
    let batch = pair_batch_min(&inputs, target_width)?;
    let width = batch.seq_len;
    let flat: Vec<i64> = labels.iter().flat_map(|l| l[..width].iter().copied()).collect();
    let hidden = model.encode(tape, &batch, train)?;
    let logits = model.mlm_logits(tape, hidden)?;
    let mlm = masked_mlm_loss(tape, logits, &flat)?;
    let nsp_logits = model.nsp_logits(tape, hidden)?;
    let nsp = nsp_loss(tape, nsp_logits, &is_next)?;
    let mut total = tape.add(mlm, nsp)?;
    let mut rtd = None;
    if let MaskPolicy::Electra { rtd_weight } = config.policy {
        // Sample generator tokens at the masked positions from the current
        // MLM distribution. Sampling is not differentiated.
        let vocab_size = model.config().vocab_size;
        let probs = tape.value(logits).data().to_vec();
        let mut disc_inputs = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        let mut include = Vec::new();
        for (row, (e, p)) in examples.iter().zip(&plans).enumerate() {
            let mut r = rng(mix_seed(&[e.seed, 0x6e6e]));
            let mut preds = Vec::new();
            for pos in 0..e.pair.len() {
                if p.actions[pos] == Action::Masked {
                    let off = (row * width + pos) * vocab_size;
                    preds.push(sample_logits(&probs[off..off + vocab_size], &mut r));
                }
            }
            let ex = rtd_label(&e.pair, p, &preds)?;
            for pos in 0..width {
                targets.push((ex.rtd_labels[pos] == RtdLabel::Replaced) as u8 as f32);
                include.push(e.pair.is_content(pos));
            }
            let mut input = e.pair.clone();
            input.ids = ex.input_ids;
            disc_inputs.push(input);
        }
        let disc_batch = pair_batch_min(&disc_inputs, width)?;
        if disc_batch.seq_len != width {
            return Err(Error::contract("discriminator batch width changed"));
        }
        let dh = model.encode(tape, &disc_batch, train)?;
        let probs = model.rtd_probs(tape, dh)?;
        let loss = tape.binary_cross_entropy_masked(probs, &targets, &include)?;
        let weighted = tape.scale(loss, rtd_weight as f32);
        total = tape.add(total, weighted)?;
        rtd = Some(loss);
    }
    Ok(Losses { total, mlm, nsp, rtd })
}

fn sample_logits(logits: &[f32], r: &mut impl Rng) -> u32 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (logits.len() - 1) as u32
}

fn eval_loss(model: &Bert<f32>, vocab: &Vocab, sets: &[Vec<Example>], config: &PretrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for set in sets {
        let mut tape = Tape::new(0);
        let l = batch_loss(model, vocab, &mut tape, set, config, false)?;
        sum += tape.value(l.total).item() as f64;
    }
    Ok(sum / sets.len().max(1) as f64)
}

/// Joint masked-LM and next-sentence pretraining on consecutive sentences of
/// `corpus`. `on_checkpoint` sees the model every `checkpoint_every` steps.
pub fn pretrain(
    corpus: &[String],
    vocab: &Vocab,
    mut model: Bert<f32>,
    config: &PretrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Bert<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    if corpus.len() < 2 {
        return Err(Error::input(format!(
            "pretraining needs at least 2 sentences, got {}",
            corpus.len()
        )));
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::input(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    if config.max_len > model.config().max_len {
        return Err(Error::input(format!(
            "max_len {} exceeds the model's {}",
            config.max_len,
            model.config().max_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    let eval_sets: Vec<Vec<Example>> = (0..config.eval_batches)
        .map(|i| sample_examples(corpus, vocab, config, mix_seed(&[0xe7a1, i as u64]), config.batch_size))
        .collect::<Result<_>>()?;
    let initial_eval_loss = eval_loss(&model, vocab, &eval_sets, config)?;

    let mut groups = vec![ParamGroup::Encoder, ParamGroup::Mlm, ParamGroup::Nsp];
    if matches!(config.policy, MaskPolicy::Electra { .. }) {
        groups.push(ParamGroup::Rtd);
    }
    let ids = model.param_ids(&groups);
    let mut adam = Adam::new(model.params(), &ids, AdamConfig::default());
    let mut step_losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let examples = sample_examples(corpus, vocab, config, mix_seed(&[0x57e9, step as u64]), config.batch_size)?;
        let mut tape = Tape::new(mix_seed(&[config.seed, 0xd50, step as u64]));
        let l = batch_loss(&model, vocab, &mut tape, &examples, config, true)?;
        let record = StepLoss {
            step,
            mlm: tape.value(l.mlm).item() as f64,
            nsp: tape.value(l.nsp).item() as f64,
            rtd: l.rtd.map_or(0.0, |v| tape.value(v).item() as f64),
            total: tape.value(l.total).item() as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::contract(format!("loss diverged at step {step}")));
        }
        model.params_mut().zero_grad();
        tape.backward(l.total, model.params_mut())?;
        adam.step(model.params_mut(), scheduled_lr(config, step))?;
        step_losses.push(record);
        if step % 50 == 0 {
            log::info!("pretrain step {step} loss {:.4}", record.total);
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, &model)?;
        }
    }
    model.params_mut().zero_grad();
    let final_eval_loss = eval_loss(&model, vocab, &eval_sets, config)?;
    Ok(PretrainOutcome {
        model,
        step_losses,
        initial_eval_loss,
        final_eval_loss,
    })
}

/// Learning rate of step `step` (0-based) under linear warmup and decay.
pub fn scheduled_lr(config: &PretrainConfig, step: usize) -> f64 {
    let t = step as f64 + 1.0;
    let warm = if config.warmup_steps == 0 { 1.0 } else { (t / config.warmup_steps as f64).min(1.0) };
    let remaining = (config.steps as f64 - step as f64) / config.steps.max(1) as f64;
    config.lr * warm * remaining
}

/// Shuffles `items` with a generator derived from `seed`.
pub(crate) fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut rng(seed));
}
