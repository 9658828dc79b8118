use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "minibert", version, about = "Train and evaluate miniature BERT encoders")]
#[command(args_override_self = true, subcommand_required = true, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a WordPiece vocabulary from a corpus (one sentence per line)
    BuildVocab(BuildVocab),
    /// Pretrain an encoder with MLM + NSP under a corruption policy
    Pretrain(Pretrain),
    /// Fine-tune a pretrained encoder for binary sentiment
    Finetune(Finetune),
    /// Write frozen-encoder [CLS] features for a labeled TSV
    ExtractFeatures(ExtractFeatures),
    /// Train a logistic-regression probe on a feature matrix
    TrainLr(TrainLr),
    /// Frozen encoder + probe on a train/test split, against the majority baseline
    Evaluate(Evaluate),
    /// Sweep decision thresholds over a score file
    SweepThreshold(SweepThreshold),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::BuildVocab(a) => &a.common,
            Command::Pretrain(a) => &a.common,
            Command::Finetune(a) => &a.common,
            Command::ExtractFeatures(a) => &a.common,
            Command::TrainLr(a) => &a.common,
            Command::Evaluate(a) => &a.common,
            Command::SweepThreshold(a) => &a.common,
        }
    }
}

#[derive(Args, Debug)]
pub struct Common {
    /// key = value file; flags given on the command line take precedence
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory that receives every output, including config.txt
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads, 0 for one per core
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Run all parallel work on a single thread
    #[arg(long, value_name = "BOOL", default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Args, Debug)]
pub struct BuildVocab {
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskPolicyArg {
    Mlm,
    WholeWord,
    Span,
    Dae,
    Electra,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ff_dim: usize,
    /// Longest input the position table covers
    #[arg(long, default_value_t = 32)]
    pub model_max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, value_name = "BOOL", default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub tie_mlm_weights: bool,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    /// One sentence per line, in document order
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization
    #[arg(long, value_name = "FILE")]
    pub init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = MaskPolicyArg::Mlm)]
    pub mask_policy: MaskPolicyArg,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    /// Span policy: geometric parameter of span lengths
    #[arg(long, default_value_t = 0.2)]
    pub geo_p: f64,
    /// Span policy: longest span
    #[arg(long, default_value_t = 10)]
    pub max_span: usize,
    /// DAE policy: per-token deletion probability
    #[arg(long, default_value_t = 0.1)]
    pub delete_rate: f64,
    /// DAE policy: also swap sentence order
    #[arg(long, value_name = "BOOL", default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub sentence_shuffle: bool,
    /// ELECTRA policy: weight of the replaced-token loss
    #[arg(long, default_value_t = 50.0)]
    pub rtd_weight: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate
    #[arg(long, default_value = "1e-2")]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, default_value_t = 4)]
    pub eval_batches: usize,
    /// Also write checkpoints/step_<N>.ckpt every N steps, 0 for never
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Finetune {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// sentence<TAB>label
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// sentence<TAB>label; without it --train is split by --train-fraction
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    /// Hold out this fraction of the training set to tune the threshold and drive the LR policy
    #[arg(long, value_name = "FRACTION")]
    pub validation_split: Option<f64>,
    #[arg(long, default_value = "1e-6")]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Cls,
    BagOfIds,
}

#[derive(Args, Debug)]
pub struct ExtractFeatures {
    /// Required for --kind cls
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureKind::Cls)]
    pub kind: FeatureKind,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct LogRegArgs {
    /// Gradient-descent step size of the probe
    #[arg(long, default_value_t = 0.1)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 500)]
    pub probe_steps: usize,
    #[arg(long, default_value = "1e-4")]
    pub l2: f64,
}

#[derive(Args, Debug)]
pub struct TrainLr {
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Score this feature matrix with the trained probe
    #[arg(long, value_name = "FILE", requires = "eval_labels")]
    pub eval_features: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "eval_features")]
    pub eval_labels: Option<PathBuf>,
    #[command(flatten)]
    pub logreg: LogRegArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// sentence<TAB>label
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    /// Also report a probe on bag-of-token-id features
    #[arg(long, value_name = "BOOL", default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub bag_of_ids: bool,
    #[command(flatten)]
    pub logreg: LogRegArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SweepThreshold {
    /// score<TAB>label
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[command(flatten)]
    pub common: Common,
}
