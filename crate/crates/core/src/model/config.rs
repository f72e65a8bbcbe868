use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and hyperparameters of the encoder-decoder.
///
/// The first `bi_layers` encoder layers see one sequence at a time; layers
/// `bi_layers + 1 ..= layers` see the concatenated query and document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub bi_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    /// Longest teacher-forced answer, EOS included.
    pub max_answer_len: usize,
    /// Head-weight temperature.
    pub tau: f64,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            bi_layers: 2,
            decoder_layers: 2,
            heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 0,
            max_query_len: 64,
            max_doc_len: 256,
            max_answer_len: 64,
            tau: 0.001,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Size of the encoder position table.
    pub fn max_encoder_positions(&self) -> usize {
        self.max_query_len.max(self.max_doc_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bi_layers == 0 || self.bi_layers >= self.layers {
            return Err(Error::Config(format!(
                "need 1 <= bi_layers < layers, got bi_layers={} layers={}",
                self.bi_layers, self.layers
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be >= 1".into()));
        }
        if self.heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("heads, head_dim and ffn_dim must be positive".into()));
        }
        if self.vocab_size < crate::corpus::RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the reserved token block",
                self.vocab_size
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_query_len == 0 || self.max_doc_len == 0 || self.max_answer_len == 0 {
            return Err(Error::Config("sequence limits must be positive".into()));
        }
        Ok(())
    }
}
