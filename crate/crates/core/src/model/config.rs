use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    ContextLm,
}

/// Where the placeholder context for the first `w − 1` positions comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CInit {
    /// The sequence's own first hidden state `h[0]`.
    FirstToken,
    /// A learned `d`-vector shared across sequences.
    Learned,
}

/// Model hyperparameters.
///
/// In baseline mode the encoder and decoder stacks run back to back with no
/// fusion, so `n_ctx_layers` and `chunk_size` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_ctx_layers: usize,
    pub chunk_size: usize,
    pub max_seq_len: usize,
    pub mode: Mode,
    pub tie_embeddings: bool,
    pub c_init: CInit,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 0,
            n_dec_layers: 4,
            n_ctx_layers: 2,
            chunk_size: 4,
            max_seq_len: 256,
            mode: Mode::ContextLm,
            tie_embeddings: true,
            c_init: CInit::FirstToken,
            dropout: 0.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by verification paths: d=8, 2 heads,
    /// 0/2 split, 2 predictor layers, w=4.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 0,
            n_dec_layers: 2,
            n_ctx_layers: 2,
            chunk_size: 4,
            max_seq_len: 16,
            ..Self::default()
        }
    }

    pub fn is_contextlm(&self) -> bool {
        self.mode == Mode::ContextLm
    }

    pub fn backbone_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }

    /// Predictor depth that actually gets instantiated.
    pub fn effective_ctx_layers(&self) -> usize {
        if self.is_contextlm() {
            self.n_ctx_layers
        } else {
            0
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size == 0 {
            errs.push("model.vocab_size must be positive".to_string());
        }
        if self.d_model == 0 {
            errs.push("model.d_model must be positive".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.backbone_layers() == 0 {
            errs.push("model needs at least one encoder or decoder layer".to_string());
        }
        if self.max_seq_len == 0 {
            errs.push("model.max_seq_len must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("model.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.init_std <= 0.0 || !self.init_std.is_finite() {
            errs.push(format!("model.init_std must be positive, got {}", self.init_std));
        }
        if self.is_contextlm() {
            if self.chunk_size < 2 {
                errs.push(format!(
                    "model.chunk_size must be >= 2 in contextlm mode, got {}",
                    self.chunk_size
                ));
            }
            if self.n_ctx_layers == 0 {
                errs.push("model.n_ctx_layers must be >= 1 in contextlm mode".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
