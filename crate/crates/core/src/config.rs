//! Model hyper-parameters and the reserved vocabulary.

use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const YES: usize = 3;
pub const NO: usize = 4;
pub const MASK: usize = 5;
/// Number of reserved token ids; ordinary words start here.
pub const N_RESERVED: usize = 6;

/// Layernorm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub adapter_rank: usize,
    /// Inner width of the factorized audio/video prefix projections.
    pub prefix_rank: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// The default desk-scale model.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 96,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 384,
            vocab_size: 64,
            max_seq_len: 24,
            d_audio: 256,
            d_video: 512,
            adapter_rank: 4,
            prefix_rank: 4,
            activation: Activation::Gelu,
        }
    }

    /// A tiny model used for gradient checks and hand-computed oracles.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 12,
            d_audio: 6,
            d_video: 5,
            adapter_rank: 2,
            prefix_rank: 2,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapter_rank == 0 || self.adapter_rank >= self.d_model {
            return fail(format!(
                "adapter_rank {} must satisfy 1 <= rank < d_model {}",
                self.adapter_rank, self.d_model
            ));
        }
        if self.prefix_rank == 0 {
            return fail("prefix_rank must be positive".into());
        }
        if self.vocab_size <= N_RESERVED {
            return fail(format!(
                "vocab_size {} must exceed the {N_RESERVED} reserved tokens",
                self.vocab_size
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.d_ff == 0 || self.d_audio == 0 || self.d_video == 0 {
            return fail("d_ff, d_audio and d_video must be positive".into());
        }
        if self.max_seq_len < 3 {
            return fail("max_seq_len must be at least 3".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_sites(&self) -> usize {
        2 * (self.n_enc_layers + self.n_dec_layers)
    }

    /// Closed-form parameter inventory.
    pub fn param_budget(&self) -> ParamBudget {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let projections = self.n_enc_layers * (attn + ffn)
            + self.n_dec_layers * (2 * attn + ffn)
            + self.vocab_size * d // token embedding
            + self.max_seq_len * d // position embedding
            + d * self.vocab_size
            + self.vocab_size; // output head
        let layernorm = ln * (2 * self.n_enc_layers + 3 * self.n_dec_layers + 2);
        let prefix = (self.d_audio + self.d_video) * self.prefix_rank + 2 * (self.prefix_rank * d + d);
        let r = self.adapter_rank;
        let adapter_per_modality = self.n_sites() * (d * r + r * r + r * d);
        ParamBudget {
            projections,
            layernorm,
            prefix,
            adapter_per_modality,
        }
    }
}

/// Parameter counts by group, derived analytically from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBudget {
    /// Embeddings, attention/feed-forward projections and the output head.
    pub projections: usize,
    pub layernorm: usize,
    pub prefix: usize,
    pub adapter_per_modality: usize,
}

impl ParamBudget {
    pub fn backbone_total(&self) -> usize {
        self.projections + self.layernorm + self.prefix
    }

    /// Trainable fraction in adapter mode with `n_modalities` adapter groups.
    pub fn adapter_fraction(&self, n_modalities: usize) -> f64 {
        let trainable = self.layernorm + self.prefix + n_modalities * self.adapter_per_modality;
        trainable as f64 / (self.projections + trainable) as f64
    }
}
