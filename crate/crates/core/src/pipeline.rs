//! Labeled datasets, the 75/25 split, frozen-encoder `[CLS]` features and the
//! logistic-regression probe on top of them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::metrics::{auc, prf1, threshold_sweep};
use crate::model::Bert;
use crate::seed::rng;
use crate::tensor::Scalar;
use crate::tokenizer::{encode_pair, encode_text, Vocab};
use crate::training::{encode_sentences, map_chunks};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    pub sentences: Vec<String>,
    pub labels: Vec<u8>,
    pub source_path: String,
}

impl LabeledDataset {
    pub fn new(sentences: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if sentences.len() != labels.len() {
            return Err(Error::input(format!(
                "{} sentences but {} labels",
                sentences.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::input(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self {
            sentences,
            labels,
            source_path: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source_path: self.source_path.clone(),
        }
    }

    /// Seeded shuffle, then the first `round(train_fraction · n)` examples
    /// (at least 1, at most n − 1) become the training set.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::input(format!("train fraction {train_fraction} not in (0, 1)")));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::input(format!("cannot split {n} examples")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(seed));
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        Ok((self.subset(&idx[..k]), self.subset(&idx[k..])))
    }

    /// Fraction of the more common label.
    pub fn majority_rate(&self) -> f64 {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        pos.max(self.len() - pos) as f64 / self.len().max(1) as f64
    }
}

/// Parses `sentence<TAB>label` lines. A first line whose label field is not
/// a number is taken as a header; blank lines are skipped.
pub fn parse_tsv(text: &str) -> Result<LabeledDataset> {
    let mut sentences = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (sentence, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected sentence<TAB>label"))?;
        let label = label.trim();
        match label {
            "0" => labels.push(0),
            "1" => labels.push(1),
            _ if i == 0 && label.parse::<f64>().is_err() => continue,
            _ => return Err(Error::parse(line_no, format!("label {label:?} is not 0 or 1"))),
        }
        sentences.push(sentence.to_string());
    }
    LabeledDataset::new(sentences, labels)
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut data = parse_tsv(&text)?;
    data.source_path = path.display().to_string();
    Ok(data)
}

pub fn dataset_to_tsv(data: &LabeledDataset) -> String {
    let mut out = String::from("sentence\tlabel\n");
    for (s, l) in data.sentences.iter().zip(&data.labels) {
        writeln!(out, "{s}\t{l}").expect("write to String");
    }
    out
}

/// `[n, dim]` row-major features with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
}

impl FeatureMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if data.len() != n * dim || labels.len() != n {
            return Err(Error::input(format!(
                "feature matrix {n}x{dim} has {} values and {} labels",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self { n, dim, data, labels })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Header `n dim`, then one space-separated row per line. Values are
    /// printed in shortest round-trip form.
    pub fn rows_to_string(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.dim);
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn labels_to_string(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn save(&self, features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        fs::write(features, self.rows_to_string())?;
        fs::write(labels, self.labels_to_string())?;
        Ok(())
    }

    pub fn load(features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (n, dim, data) = parse_feature_rows(&fs::read_to_string(features)?)?;
        let labels = parse_labels(&fs::read_to_string(labels)?)?;
        Self::new(n, dim, data, labels)
    }
}

/// Inverse of [`FeatureMatrix::rows_to_string`].
pub fn parse_feature_rows(text: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing `n dim` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(1, format!("bad header field {t:?}"))))
        .collect::<Result<_>>()?;
    let [n, dim] = dims[..] else {
        return Err(Error::parse(1, "header must be `n dim`"));
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| Error::parse(i + 1, format!("bad value {tok:?}")))?;
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::parse(i + 1, format!("expected {dim} values, found {}", data.len() - before)));
        }
        rows += 1;
        if rows > n {
            return Err(Error::parse(i + 1, format!("more than {n} rows")));
        }
    }
    if rows != n {
        return Err(Error::parse(text.lines().count(), format!("expected {n} rows, found {rows}")));
    }
    Ok((n, dim, data))
}

pub fn parse_labels(text: &str) -> Result<Vec<u8>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::parse(i + 1, format!("label {other:?} is not 0 or 1"))),
        })
        .collect()
}

/// `score<TAB>label` lines, optional header.
pub fn parse_score_file(text: &str) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(s), Some(l), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(i + 1, "expected score<TAB>label"));
        };
        let score = match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(Error::parse(i + 1, "score is not finite")),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::parse(i + 1, format!("bad score {s:?}"))),
        };
        let label = match l.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(i + 1, format!("label {other:?} is not 0 or 1"))),
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

/// Position-0 hidden vectors of every sentence, computed without dropout
/// and without touching the parameters.
pub fn extract_cls_features<T: Scalar>(
    model: &Bert<T>,
    vocab: &Vocab,
    data: &LabeledDataset,
    max_len: usize,
) -> Result<FeatureMatrix> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens but the checkpoint expects vocab_size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let pairs = encode_sentences(vocab, &data.sentences, max_len)?;
    let rows: Vec<Vec<f32>> = map_chunks(model, &pairs, 32, |m, tape, batch| {
        let h = m.encode(tape, batch, false)?;
        let cls = tape.select(h, 1, 0)?;
        let dim = m.config().hidden_dim;
        Ok(tape
            .value(cls)
            .data()
            .chunks(dim)
            .map(|r| r.iter().map(|v| v.to_f64_lossy() as f32).collect())
            .collect())
    })?;
    let dim = model.config().hidden_dim;
    FeatureMatrix::new(data.len(), dim, rows.concat(), data.labels.clone())
}

/// Token-count features normalized by sequence length: the bag-of-ids
/// baseline.
pub fn bag_of_ids_features(vocab: &Vocab, data: &LabeledDataset, max_len: usize) -> Result<FeatureMatrix> {
    let dim = vocab.len();
    let mut out = vec![0.0f32; data.len() * dim];
    for (i, s) in data.sentences.iter().enumerate() {
        let ids = encode_text(vocab, s);
        let ids = &ids[..ids.len().min(max_len.saturating_sub(2))];
        for &id in ids {
            out[i * dim + id as usize] += 1.0 / ids.len() as f32;
        }
    }
    // Confirms every sentence fits the tokenizer contract.
    for s in &data.sentences {
        encode_pair(vocab, s, None, max_len)?;
    }
    FeatureMatrix::new(data.len(), dim, out, data.labels.clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegConfig {
    pub lr: f64,
    pub steps: usize,
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { lr: 0.1, steps: 500, l2: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective before each step and after the last.
    pub loss_history: Vec<f64>,
}

impl LogisticRegression {
    pub fn predict_proba(&self, features: &FeatureMatrix) -> Vec<f64> {
        (0..features.n)
            .map(|i| sigmoid(self.logit(features.row(i))))
            .collect()
    }

    /// `logreg <dim>`, then the bias, then one weight per line. Values are
    /// printed in shortest round-trip form so parsing restores them exactly.
    /// The loss history is not stored.
    pub fn to_text(&self) -> String {
        let mut out = format!("logreg {}\n{}\n", self.weights.len(), self.bias);
        for w in &self.weights {
            writeln!(out, "{w}").expect("write to String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let dim = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("logreg ")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::parse(1, "expected `logreg <dim>`"))?,
            None => return Err(Error::parse(1, "empty model file")),
        };
        let mut value = |what: &str| -> Result<f64> {
            let (i, l) = lines.next().ok_or_else(|| Error::parse(0, format!("missing {what}")))?;
            match l.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(i + 1, format!("bad {what} {l:?}"))),
            }
        };
        let bias = value("bias")?;
        let mut weights = Vec::with_capacity(dim.min(1 << 16));
        for _ in 0..dim {
            weights.push(value("weight")?);
        }
        if let Some((i, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(i + 1, format!("trailing content {l:?}")));
        }
        Ok(Self { weights, bias, loss_history: Vec::new() })
    }

    fn logit(&self, x: &[f32]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(&a, &w)| a as f64 * w).sum::<f64>()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Largest step size for which full-batch gradient descent on the
/// regularized logistic objective never increases it: `1 / L` with
/// `L = max‖x‖² / 4 + l2`, bias included as a unit feature.
pub fn logreg_stability_bound(features: &FeatureMatrix, l2: f64) -> f64 {
    let max_sq = (0..features.n)
        .map(|i| 1.0 + features.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    1.0 / (max_sq / 4.0 + l2)
}

fn logreg_objective(model: &LogisticRegression, f: &FeatureMatrix, l2: f64) -> f64 {
    let data: f64 = (0..f.n)
        .map(|i| {
            let z = model.logit(f.row(i));
            // log(1 + e^z) − y z, stable for large |z|.
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - f.labels[i] as f64 * z
        })
        .sum::<f64>()
        / f.n as f64;
    data + 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Full-batch gradient descent on mean binary cross-entropy plus
/// `l2/2 · ‖w‖²` (the bias is not penalized). Weights start at zero and the
/// bias at the log-odds of the class prior, so with no steps the model
/// predicts the majority class.
pub fn train_logreg(features: &FeatureMatrix, config: &LogRegConfig) -> Result<LogisticRegression> {
    let pos = features.labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == features.n {
        return Err(Error::input("logistic regression needs both classes"));
    }
    let mut model = LogisticRegression {
        weights: vec![0.0; features.dim],
        bias: (pos as f64 / (features.n - pos) as f64).ln(),
        loss_history: Vec::with_capacity(config.steps + 1),
    };
    let n = features.n as f64;
    for _ in 0..config.steps {
        model.loss_history.push(logreg_objective(&model, features, config.l2));
        let mut gw: Vec<f64> = model.weights.iter().map(|w| config.l2 * w).collect();
        let mut gb = 0.0;
        for i in 0..features.n {
            let x = features.row(i);
            let r = (sigmoid(model.logit(x)) - features.labels[i] as f64) / n;
            for (g, &v) in gw.iter_mut().zip(x) {
                *g += r * v as f64;
            }
            gb += r;
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.lr * g;
        }
        model.bias -= config.lr * gb;
    }
    model.loss_history.push(logreg_objective(&model, features, config.l2));
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub n_train: usize,
    pub n_test: usize,
    /// Test accuracy predicting positive when the probability is ≥ 0.5.
    pub accuracy: f64,
    pub auc: f64,
    pub threshold: f64,
    pub f1: f64,
    /// Test accuracy of always predicting the training majority class.
    pub majority_baseline: f64,
    pub bag_of_ids_accuracy: Option<f64>,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k}\t{v}").expect("write to String");
        line("n_train", self.n_train.to_string());
        line("n_test", self.n_test.to_string());
        line("accuracy", format!("{:.6}", self.accuracy));
        line("auc", format!("{:.6}", self.auc));
        line("threshold", format!("{:.2}", self.threshold));
        line("f1", format!("{:.6}", self.f1));
        line("majority_baseline", format!("{:.6}", self.majority_baseline));
        if let Some(b) = self.bag_of_ids_accuracy {
            line("bag_of_ids_accuracy", format!("{b:.6}"));
        }
        out
    }
}

fn accuracy_at_half(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= 0.5) == (l == 1)).count();
    hits as f64 / labels.len().max(1) as f64
}

fn majority_baseline(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let pos = train.labels.iter().filter(|&&l| l == 1).count();
    let majority = u8::from(2 * pos >= train.len());
    test.labels.iter().filter(|&&l| l == majority).count() as f64 / test.len().max(1) as f64
}

/// Frozen-encoder features, a logistic-regression probe trained on them, and
/// the test metrics next to the majority-class baseline.
pub fn evaluate_pipeline<T: Scalar>(
    model: &Bert<T>,
    vocab: &Vocab,
    train: &LabeledDataset,
    test: &LabeledDataset,
    max_len: usize,
    logreg: &LogRegConfig,
    with_bag_of_ids: bool,
) -> Result<PipelineReport> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let ftrain = extract_cls_features(model, vocab, train, max_len)?;
    let ftest = extract_cls_features(model, vocab, test, max_len)?;
    let probe = train_logreg(&ftrain, logreg)?;
    let scores = probe.predict_proba(&ftest);
    let auc = auc(&scores, &test.labels).unwrap_or(f64::NAN);
    let (threshold, f1) = match threshold_sweep(&scores, &test.labels) {
        Ok(r) => (r.best_threshold, prf1(&scores, &test.labels, r.best_threshold)?.f1),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let bag_of_ids_accuracy = if with_bag_of_ids {
        let btrain = bag_of_ids_features(vocab, train, max_len)?;
        let btest = bag_of_ids_features(vocab, test, max_len)?;
        let probe = train_logreg(&btrain, logreg)?;
        Some(accuracy_at_half(&probe.predict_proba(&btest), &test.labels))
    } else {
        None
    };
    Ok(PipelineReport {
        n_train: train.len(),
        n_test: test.len(),
        accuracy: accuracy_at_half(&scores, &test.labels),
        auc,
        threshold,
        f1,
        majority_baseline: majority_baseline(train, test),
        bag_of_ids_accuracy,
    })
}
