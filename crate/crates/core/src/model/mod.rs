//! A small decoder-only transformer with multi-head causal attention, a KV
//! cache with original-position bookkeeping, and token-type segmentation.
//! Pre-norm blocks, GELU FFN, learned positional embeddings bound to
//! absolute positions so that hard cache compaction never shifts them.

mod forward;
mod params;
mod segmentation;

pub use forward::{
    attention_with_mask, decode_step, forward_full, prefill, AttentionMaps, DecodeSession,
    KVCache, LayerAttention, StepOutput,
};
pub use params::{init_model, parameter_count, LayerParams, Params};
pub use segmentation::{SegmentKind, TokenSegmentation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy decoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            vocab_size: 512,
            max_seq: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dims must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dims must be >= 1".into()));
        }
        Ok(())
    }
}
