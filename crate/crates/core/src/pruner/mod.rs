//! The rate-selection pipeline: attention-share features over token
//! segments, FastV-style importance ranking of visual tokens, nested
//! candidate keep-masks (one per discrete rate), a linear rate predictor,
//! Gumbel-Softmax rate sampling with a straight-through backward, and the
//! final per-query attention mask.
//!
//! Only visual (img) tokens are ever dropped; every mask pins non-visual
//! positions and the query's own position to 1.

mod features;
mod gumbel;
mod masks;
mod predictor;

pub use features::{score_visual_tokens, segment_shares, FeatureVector};
pub use gumbel::{gumbel_noise, gumbel_softmax, gumbel_softmax_tape, GumbelConfig, GumbelSample};
pub use masks::{build_candidate_masks, compose_attention_mask, mix_masks, CandidateMaskSet};
pub use predictor::{
    predict_rate_distribution, predict_rate_distribution_tape, PredictorParams, RateDistribution,
};

use crate::error::{Error, Result};

/// Discretized compression rates r_k = (k−1)/K for k = 1..=K.
/// r_1 = 0 keeps every token; r_K = (K−1)/K < 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateSet {
    k: usize,
}

impl RateSet {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("rate set needs K >= 2, got {k}")));
        }
        Ok(RateSet { k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rate of class index `idx` (0-based): idx / K.
    pub fn rate(&self, idx: usize) -> f64 {
        debug_assert!(idx < self.k);
        idx as f64 / self.k as f64
    }

    pub fn rates(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.rate(i)).collect()
    }

    /// Visual tokens removed at class index `idx` out of `n_visual`:
    /// floor(idx · N / K).
    pub fn drop_count(&self, idx: usize, n_visual: usize) -> usize {
        idx * n_visual / self.k
    }
}
