use crate::error::{Error, Result};

/// Encoder architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Reuse the transposed token embedding as the MLM projection.
    pub tie_mlm_weights: bool,
}

impl ModelConfig {
    /// Desk-scale default used by the CLI and tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            max_len: 32,
            dropout: 0.1,
            tie_mlm_weights: false,
        }
    }

    /// DistilBERT-sized encoder (6 layers, hidden 768).
    pub fn distil_base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 768,
            num_layers: 6,
            num_heads: 12,
            ff_dim: 3072,
            max_len: 512,
            dropout: 0.1,
            tie_mlm_weights: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::input(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::input(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIAL as usize {
            return Err(Error::input("vocab_size is smaller than the reserved tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Shape of the encoder output for a `[batch, seq_len]` input.
    pub fn hidden_shape(&self, batch: usize, seq_len: usize) -> Result<[usize; 3]> {
        self.validate()?;
        if seq_len > self.max_len {
            return Err(Error::contract(format!(
                "sequence length {seq_len} exceeds max_len {}",
                self.max_len
            )));
        }
        Ok([batch, seq_len, self.hidden_dim])
    }
}
