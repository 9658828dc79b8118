//! Miniature BERT toolkit.
//!
//! ```text
//! text ─► tokenizer ─► corruption ─► model (encoder + MLM/NSP/sentiment heads)
//!                                       │
//!              training (pretrain, finetune, plateau LR) ◄┘
//!                                       │
//!              metrics (AUC, F1 sweep)  ◄┤
//!              pipeline ([CLS] features + logistic regression)
//! ```

pub mod corruption;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod run_config;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
