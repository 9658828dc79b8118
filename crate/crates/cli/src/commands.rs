use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use minibert::metrics::{auc, prf1, threshold_sweep};
use minibert::model::{Bert, ModelConfig};
use minibert::pipeline::{
    bag_of_ids_features, evaluate_pipeline, extract_cls_features, parse_feature_rows, parse_labels, parse_score_file,
    parse_tsv, train_logreg, FeatureMatrix, LabeledDataset, LogRegConfig,
};
use minibert::run_config::RunConfig;
use minibert::tokenizer::{build_vocab, Vocab};
use minibert::training::{
    encode_sentences, finetune, format_epoch_log, predict_scores, pretrain, FinetuneConfig, MaskPolicy, PretrainConfig,
};

use crate::args::*;

/// Every file a command writes goes through here.
struct OutDir(PathBuf);

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self(dir.to_path_buf()))
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.0.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        Ok(p)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name)?;
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    fn save_model(&self, name: &str, model: &Bert<f32>) -> Result<()> {
        let p = self.path(name)?;
        model.save(&p).with_context(|| format!("cannot write {}", p.display()))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::parse(&read(path)?).with_context(|| format!("in vocabulary {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut d = parse_tsv(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    d.source_path = path.display().to_string();
    Ok(d)
}

fn load_model(path: &Path, vocab: &Vocab, vocab_path: &Path) -> Result<Bert<f32>> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let model = minibert::model::Checkpoint::decode(&bytes)
        .and_then(|c| c.into_model())
        .with_context(|| format!("in checkpoint {}", path.display()))?;
    if model.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint {} expects vocab_size {} but vocabulary {} has {} tokens",
            path.display(),
            model.config().vocab_size,
            vocab_path.display(),
            vocab.len()
        );
    }
    Ok(model)
}

fn load_features(features: &Path, labels: &Path) -> Result<FeatureMatrix> {
    let (n, dim, data) = parse_feature_rows(&read(features)?).with_context(|| format!("in {}", features.display()))?;
    let labels_v = parse_labels(&read(labels)?).with_context(|| format!("in {}", labels.display()))?;
    if labels_v.len() != n {
        bail!("{} has {n} rows but {} has {} labels", features.display(), labels.display(), labels_v.len());
    }
    Ok(FeatureMatrix::new(n, dim, data, labels_v)?)
}

fn scores_tsv(scores: &[f64], labels: &[u8]) -> String {
    let mut out = String::from("score\tlabel\n");
    for (s, l) in scores.iter().zip(labels) {
        writeln!(out, "{s}\t{l}").expect("write to String");
    }
    out
}

fn logreg_config(a: &LogRegArgs) -> LogRegConfig {
    LogRegConfig { lr: a.probe_lr, steps: a.probe_steps, l2: a.l2 }
}

fn init_threads(common: &Common) -> Result<()> {
    let n = if common.deterministic { 1 } else { common.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot start the thread pool")
}

pub fn run(command: &Command, resolved: &RunConfig) -> Result<()> {
    let common = command.common();
    init_threads(common)?;
    let out = OutDir::create(&common.out_dir)?;
    match command {
        Command::BuildVocab(a) => build_vocab_cmd(a, &out)?,
        Command::Pretrain(a) => pretrain_cmd(a, &out)?,
        Command::Finetune(a) => finetune_cmd(a, &out)?,
        Command::ExtractFeatures(a) => extract_cmd(a, &out)?,
        Command::TrainLr(a) => train_lr_cmd(a, &out)?,
        Command::Evaluate(a) => evaluate_cmd(a, &out)?,
        Command::SweepThreshold(a) => sweep_cmd(a, &out)?,
    }
    out.write("config.txt", resolved.to_file_string())?;
    log::info!("outputs in {}", out.0.display());
    Ok(())
}

fn corpus_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn build_vocab_cmd(a: &BuildVocab, out: &OutDir) -> Result<()> {
    let corpus = corpus_lines(&a.corpus)?;
    let vocab = build_vocab(&corpus, a.vocab_size)?;
    log::info!("vocabulary of {} tokens from {} sentences", vocab.len(), corpus.len());
    out.write("vocab.txt", vocab.to_file_string())
}

fn mask_policy(a: &Pretrain) -> MaskPolicy {
    match a.mask_policy {
        MaskPolicyArg::Mlm => MaskPolicy::Mlm,
        MaskPolicyArg::WholeWord => MaskPolicy::WholeWord,
        MaskPolicyArg::Span => MaskPolicy::Span { geo_p: a.geo_p, max_span: a.max_span },
        MaskPolicyArg::Dae => MaskPolicy::Dae { delete_rate: a.delete_rate, shuffle: a.sentence_shuffle },
        MaskPolicyArg::Electra => MaskPolicy::Electra { rtd_weight: a.rtd_weight },
    }
}

fn pretrain_cmd(a: &Pretrain, out: &OutDir) -> Result<()> {
    let corpus = corpus_lines(&a.corpus)?;
    let vocab = load_vocab(&a.vocab)?;
    let m = &a.model;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        hidden_dim: m.hidden_dim,
        num_layers: m.num_layers,
        num_heads: m.num_heads,
        ff_dim: m.ff_dim,
        max_len: m.model_max_len,
        dropout: m.dropout,
        tie_mlm_weights: m.tie_mlm_weights,
    };
    config.validate()?;
    let model = match &a.init_checkpoint {
        Some(p) => {
            let model = load_model(p, &vocab, &a.vocab)?;
            model
                .check_compatible(&config)
                .with_context(|| format!("in checkpoint {}", p.display()))?;
            model
        }
        None => Bert::<f32>::init(config, a.common.seed)?,
    };
    let cfg = PretrainConfig {
        policy: mask_policy(a),
        mask_rate: a.mask_rate,
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup_steps,
        seed: a.common.seed,
        max_len: a.max_len,
        eval_batches: a.eval_batches,
        checkpoint_every: a.checkpoint_every,
    };
    let outcome = pretrain(&corpus, &vocab, model, &cfg, |step, model| {
        out.save_model(&format!("checkpoints/step_{step}.ckpt"), model)
            .map_err(|e| minibert::Error::Io(std::io::Error::other(format!("{e:#}"))))
    })?;
    let mut log = String::from("step\tmlm\tnsp\trtd\ttotal\n");
    for s in &outcome.step_losses {
        writeln!(log, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", s.step, s.mlm, s.nsp, s.rtd, s.total)?;
    }
    out.write("pretrain_log.tsv", log)?;
    let ratio = outcome.final_eval_loss / outcome.initial_eval_loss;
    log::info!(
        "eval loss {:.4} -> {:.4} ({:.1}% of initial)",
        outcome.initial_eval_loss,
        outcome.final_eval_loss,
        100.0 * ratio
    );
    out.write(
        "pretrain_summary.txt",
        format!(
            "initial_eval_loss\t{:.6}\nfinal_eval_loss\t{:.6}\nratio\t{ratio:.6}\n",
            outcome.initial_eval_loss, outcome.final_eval_loss
        ),
    )?;
    out.save_model("model.ckpt", &outcome.model)
}

fn train_test(data: &Path, test: Option<&Path>, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_dataset(data)?;
    match test {
        Some(t) => Ok((train, load_dataset(t)?)),
        None => Ok(train.split(fraction, seed)?),
    }
}

fn finetune_cmd(a: &Finetune, out: &OutDir) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab, &a.vocab)?;
    let (train, test) = train_test(&a.train, a.test.as_deref(), a.train_fraction, a.common.seed)?;
    let cfg = FinetuneConfig {
        lr: a.lr,
        lr_factor: a.lr_factor,
        patience: a.patience,
        max_epochs: a.max_epochs,
        batch_size: a.batch_size,
        seed: a.common.seed,
        max_len: a.max_len,
        validation_split: a.validation_split,
    };
    let (model, records) = finetune(model, &vocab, &train, &test, &cfg)?;
    out.write("epoch_log.tsv", format_epoch_log(&records))?;
    let pairs = encode_sentences(&vocab, &test.sentences, a.max_len)?;
    let scores = predict_scores(&model, &pairs, 32)?;
    out.write("test_scores.tsv", scores_tsv(&scores, &test.labels))?;
    match threshold_sweep(&scores, &test.labels) {
        Ok(r) => out.write("threshold_report.tsv", r.to_tsv())?,
        Err(e) => log::warn!("no threshold report: {e}"),
    }
    out.save_model("model.ckpt", &model)
}

fn extract_cmd(a: &ExtractFeatures, out: &OutDir) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let data = load_dataset(&a.data)?;
    let features = match a.kind {
        FeatureKind::Cls => {
            let Some(ckpt) = &a.checkpoint else {
                bail!("--kind cls needs --checkpoint");
            };
            let model = load_model(ckpt, &vocab, &a.vocab)?;
            extract_cls_features(&model, &vocab, &data, a.max_len)?
        }
        FeatureKind::BagOfIds => bag_of_ids_features(&vocab, &data, a.max_len)?,
    };
    out.write("features.txt", features.rows_to_string())?;
    out.write("labels.txt", features.labels_to_string())
}

fn train_lr_cmd(a: &TrainLr, out: &OutDir) -> Result<()> {
    let train = load_features(&a.features, &a.labels)?;
    let eval = match (&a.eval_features, &a.eval_labels) {
        (Some(f), Some(l)) => {
            let m = load_features(f, l)?;
            if m.dim != train.dim {
                bail!("{} has dim {} but {} has dim {}", f.display(), m.dim, a.features.display(), train.dim);
            }
            Some(m)
        }
        _ => None,
    };
    let cfg = logreg_config(&a.logreg);
    let model = train_logreg(&train, &cfg)?;
    let mut history = String::from("step\tobjective\n");
    for (i, v) in model.loss_history.iter().enumerate() {
        writeln!(history, "{i}\t{v:.9}")?;
    }
    out.write("logreg_loss.tsv", history)?;
    out.write("logreg.txt", model.to_text())?;
    let scored = eval.as_ref().unwrap_or(&train);
    out.write("scores.tsv", scores_tsv(&model.predict_proba(scored), &scored.labels))?;
    if let Ok(v) = auc(&model.predict_proba(scored), &scored.labels) {
        log::info!("probe AUC {v:.4}");
    }
    Ok(())
}

fn evaluate_cmd(a: &Evaluate, out: &OutDir) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab, &a.vocab)?;
    let (train, test) = train_test(&a.data, None, a.train_fraction, a.common.seed)?;
    let report = evaluate_pipeline(&model, &vocab, &train, &test, a.max_len, &logreg_config(&a.logreg), a.bag_of_ids)?;
    log::info!(
        "accuracy {:.4} vs majority baseline {:.4}",
        report.accuracy,
        report.majority_baseline
    );
    out.write("report.txt", report.to_text())
}

fn sweep_cmd(a: &SweepThreshold, out: &OutDir) -> Result<()> {
    let (scores, labels) = parse_score_file(&read(&a.scores)?).with_context(|| format!("in {}", a.scores.display()))?;
    let report = threshold_sweep(&scores, &labels)?;
    let best = prf1(&scores, &labels, report.best_threshold)?;
    out.write("threshold_report.tsv", report.to_tsv())?;
    let auc = auc(&scores, &labels).map_or("nan".to_string(), |v| format!("{v:.6}"));
    out.write(
        "metrics.txt",
        format!(
            "auc\t{auc}\nbest_threshold\t{:.2}\nprecision\t{:.6}\nrecall\t{:.6}\nf1\t{:.6}\naccuracy\t{:.6}\n",
            report.best_threshold, best.precision, best.recall, best.f1, best.accuracy
        ),
    )
}

