use std::fmt::Write as _;

use super::pretrain::seeded_shuffle;
use super::{encode_sentences, lr_update, pair_batch, predict_scores, Decision, LrPolicyState};
use crate::error::{Error, Result};
use crate::metrics::{auc, prf1, threshold_sweep};
use crate::model::{sentiment_loss, Bert, ParamGroup};
use crate::pipeline::LabeledDataset;
use crate::seed::mix_seed;
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::tokenizer::{TokenizedPair, Vocab};

pub const EPOCH_LOG_HEADER: &str = "epoch\ttrain_loss\ttrain_auc\ttest_loss\ttest_auc\tthreshold\ttest_f1\tlr";

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Fraction of the training set held out to pick the threshold and drive
    /// the learning-rate policy. `None` tunes on the test set.
    pub validation_split: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            lr_factor: LrPolicyState::DEFAULT_FACTOR,
            patience: LrPolicyState::DEFAULT_PATIENCE,
            max_epochs: 500,
            batch_size: 16,
            seed: 42,
            max_len: 32,
            validation_split: None,
        }
    }
}

/// One row of the epoch log. Undefined metrics are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auc: f64,
    pub test_loss: f64,
    pub test_auc: f64,
    pub threshold: f64,
    pub test_f1: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl EpochRecord {
    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6e}",
            self.epoch,
            fmt_f(self.train_loss),
            fmt_f(self.train_auc),
            fmt_f(self.test_loss),
            fmt_f(self.test_auc),
            fmt_f(self.threshold),
            fmt_f(self.test_f1),
            self.lr
        )
    }
}

pub fn format_epoch_log(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{}", r.to_tsv_row()).expect("write to String");
    }
    out
}

fn bce(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

fn auc_or_nan(scores: &[f64], labels: &[u8]) -> f64 {
    auc(scores, labels).unwrap_or_else(|e| {
        log::warn!("{e}");
        f64::NAN
    })
}

struct Encoded {
    pairs: Vec<TokenizedPair>,
    labels: Vec<u8>,
}

fn encode(vocab: &Vocab, data: &LabeledDataset, max_len: usize) -> Result<Encoded> {
    Ok(Encoded {
        pairs: encode_sentences(vocab, &data.sentences, max_len)?,
        labels: data.labels.clone(),
    })
}

/// Trains the encoder and sentiment head with binary cross-entropy, one
/// evaluation and threshold sweep per epoch, and the plateau learning-rate
/// policy on the tuning-set AUC.
pub fn finetune(
    mut model: Bert<f32>,
    vocab: &Vocab,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &FinetuneConfig,
) -> Result<(Bert<f32>, Vec<EpochRecord>)> {
    if config.max_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::input("training and test sets must be non-empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::input(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let (train, tune) = match config.validation_split {
        Some(f) => {
            let (t, v) = train.split(1.0 - f, mix_seed(&[config.seed, 0x7a1]))?;
            (t, Some(v))
        }
        None => (train.clone(), None),
    };
    if train.labels.iter().all(|&l| l == train.labels[0]) {
        log::warn!("training set has a single class, AUC will be undefined");
    }
    let train_enc = encode(vocab, &train, config.max_len)?;
    let test_enc = encode(vocab, test, config.max_len)?;
    let tune_enc = tune.as_ref().map(|t| encode(vocab, t, config.max_len)).transpose()?;

    let ids = model.param_ids(&[ParamGroup::Encoder, ParamGroup::Sentiment]);
    let mut adam = Adam::new(model.params(), &ids, AdamConfig::default());
    let mut policy = LrPolicyState::with(config.lr, config.lr_factor, config.patience);
    let mut records = Vec::new();
    let chunk = config.batch_size.max(32);
    for epoch in 1..=config.max_epochs {
        let lr = policy.current_lr;
        let mut order: Vec<usize> = (0..train_enc.pairs.len()).collect();
        seeded_shuffle(&mut order, mix_seed(&[config.seed, 0xf1e, epoch as u64]));
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<TokenizedPair> = idx.iter().map(|&i| train_enc.pairs[i].clone()).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train_enc.labels[i]).collect();
            let batch = pair_batch(&pairs)?;
            let mut tape = Tape::new(mix_seed(&[config.seed, epoch as u64, b as u64]));
            let h = model.encode(&mut tape, &batch, true)?;
            let s = model.sentiment_score(&mut tape, h)?;
            let loss = sentiment_loss(&mut tape, s, &labels)?;
            model.params_mut().zero_grad();
            tape.backward(loss, model.params_mut())?;
            adam.step(model.params_mut(), lr)?;
        }
        model.params_mut().zero_grad();

        let train_scores = predict_scores(&model, &train_enc.pairs, chunk)?;
        let test_scores = predict_scores(&model, &test_enc.pairs, chunk)?;
        let test_auc = auc_or_nan(&test_scores, &test_enc.labels);
        let (tune_scores, tune_labels, tune_auc) = match &tune_enc {
            Some(t) => {
                let s = predict_scores(&model, &t.pairs, chunk)?;
                let a = auc_or_nan(&s, &t.labels);
                (s, t.labels.clone(), a)
            }
            None => (test_scores.clone(), test_enc.labels.clone(), test_auc),
        };
        let threshold = threshold_sweep(&tune_scores, &tune_labels).map_or(f64::NAN, |r| r.best_threshold);
        let test_f1 = if threshold.is_nan() {
            f64::NAN
        } else {
            prf1(&test_scores, &test_enc.labels, threshold).map_or(f64::NAN, |m| m.f1)
        };
        let record = EpochRecord {
            epoch,
            train_loss: bce(&train_scores, &train_enc.labels),
            train_auc: auc_or_nan(&train_scores, &train_enc.labels),
            test_loss: bce(&test_scores, &test_enc.labels),
            test_auc,
            threshold,
            test_f1,
            lr,
        };
        log::info!("{}", record.to_tsv_row());
        records.push(record);
        let (next, decision) = lr_update(&policy, tune_auc);
        policy = next;
        if decision == Decision::Stop {
            log::info!("no improvement for {} epochs, stopping", policy.patience);
            break;
        }
    }
    Ok((model, records))
}
