//! The generation loop with pruning integrated: per-step feature extraction,
//! rate prediction and sampling, hard KV-cache compaction at inference and
//! soft masking at training, plus the FastV / VTW / FP / DP baselines.

mod baselines;
mod generate;
mod sampling;
mod schedule;

pub use baselines::{dp_retain_fraction, fastv_keep_vector, vtw_keep_vector};
pub use generate::{generate, generate_observed, hard_prune_step, PruneMode, StepObserver};
pub use sampling::{greedy, top_p};
pub use schedule::{read_schedules, write_schedules, PruneSchedule, StepRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruner::GumbelConfig;

/// Pruning strategy for a generation run. Layer indices are 0-based: a
/// strategy with `k_layer = K` leaves layers 0..K untouched and prunes
/// layers K and deeper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PruneStrategy {
    None,
    DyRate,
    FastV { k_layer: usize, rate: f64 },
    Vtw { k_layer: usize },
    /// FixedPrune: re-ranks survivors each step toward a fixed target rate.
    Fp { rate: f64, k_layer: usize },
    /// DepthBasedPrune: per-layer retain fraction from the layer number.
    Dp { p_prune_4th: f64, r_prime: f64 },
}

impl PruneStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PruneStrategy::None => "none",
            PruneStrategy::DyRate => "dyrate",
            PruneStrategy::FastV { .. } => "fastv",
            PruneStrategy::Vtw { .. } => "vtw",
            PruneStrategy::Fp { .. } => "fp",
            PruneStrategy::Dp { .. } => "dp",
        }
    }

    pub fn params_string(&self) -> String {
        match self {
            PruneStrategy::None => "-".into(),
            PruneStrategy::DyRate => "-".into(),
            PruneStrategy::FastV { k_layer, rate } => format!("K={k_layer} R={rate}"),
            PruneStrategy::Vtw { k_layer } => format!("K={k_layer}"),
            PruneStrategy::Fp { rate, k_layer } => format!("R={rate} K={k_layer}"),
            PruneStrategy::Dp { p_prune_4th, r_prime } => {
                format!("P={p_prune_4th} R'={r_prime}")
            }
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let check_rate = |r: f64, what: &str| {
            if !(0.0..1.0).contains(&r) {
                Err(Error::Config(format!("{what} must be in [0, 1), got {r}")))
            } else {
                Ok(())
            }
        };
        let check_layer = |k: usize| {
            if k < 1 || k > n_layers {
                Err(Error::Config(format!("K_layer {k} outside [1, {n_layers}]")))
            } else {
                Ok(())
            }
        };
        match self {
            PruneStrategy::None | PruneStrategy::DyRate => Ok(()),
            PruneStrategy::FastV { k_layer, rate } => {
                check_layer(*k_layer)?;
                check_rate(*rate, "FastV rate")
            }
            PruneStrategy::Vtw { k_layer } => check_layer(*k_layer),
            PruneStrategy::Fp { rate, k_layer } => {
                check_layer(*k_layer)?;
                check_rate(*rate, "FP rate")
            }
            PruneStrategy::Dp { p_prune_4th, r_prime } => {
                check_rate(*p_prune_4th, "DP P_prune_4th")?;
                check_rate(*r_prime, "DP R'")
            }
        }
    }

    /// Parse forms like `none`, `dyrate`, `fastv(3,0.5)`, `vtw(2)`,
    /// `fp(0.5,3)`, `dp(0.3,0.2)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(ix) => {
                if !s.ends_with(')') {
                    return Err(Error::Config(format!("bad strategy syntax: {s}")));
                }
                let inner = &s[ix + 1..s.len() - 1];
                let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
                (&s[..ix], parts)
            }
            None => (s, Vec::new()),
        };
        let arg_f = |i: usize| -> Result<f64> {
            args.get(i)
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| Error::Config(format!("strategy {head} needs numeric arg {i}")))
        };
        let arg_u = |i: usize| -> Result<usize> {
            args.get(i)
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| Error::Config(format!("strategy {head} needs integer arg {i}")))
        };
        match head {
            "none" => Ok(PruneStrategy::None),
            "dyrate" => Ok(PruneStrategy::DyRate),
            "fastv" => Ok(PruneStrategy::FastV { k_layer: arg_u(0)?, rate: arg_f(1)? }),
            "vtw" => Ok(PruneStrategy::Vtw { k_layer: arg_u(0)? }),
            "fp" => Ok(PruneStrategy::Fp { rate: arg_f(0)?, k_layer: arg_u(1)? }),
            "dp" => Ok(PruneStrategy::Dp { p_prune_4th: arg_f(0)?, r_prime: arg_f(1)? }),
            other => Err(Error::Config(format!("unknown strategy: {other}"))),
        }
    }
}

/// Token selection during generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopP { p: f64, seed: u64 },
}

/// Generation-loop settings.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    /// First pruned layer for DyRate (0-based); also where its features are
    /// read.
    pub prune_layer: usize,
    /// Number of discrete rates K for DyRate.
    pub rate_classes: usize,
    pub gumbel: GumbelConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 16,
            prune_layer: 3,
            rate_classes: 4,
            gumbel: GumbelConfig::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let DecodeStrategy::TopP { p, .. } = self.strategy {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top-p must be in (0, 1], got {p}")));
            }
        }
        if self.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if self.prune_layer < 1 || self.prune_layer > n_layers {
            return Err(Error::Config(format!(
                "prune_layer {} outside [1, {n_layers}]",
                self.prune_layer
            )));
        }
        if self.rate_classes < 2 {
            return Err(Error::Config("rate_classes must be >= 2".into()));
        }
        self.gumbel.validate()
    }
}
