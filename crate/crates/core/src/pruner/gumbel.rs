//! Gumbel-Softmax rate sampling.
//!
//! Forward draws a (near-)one-hot sample whose expectation matches the rate
//! distribution; the straight-through estimator backpropagates through the
//! soft relaxation. Zero probabilities are clamped to 1e-20 before the log.

use crate::error::{Error, Result};
use crate::numerics::rng::SplitMix64;
use crate::numerics::{GradTape, VarId};
use crate::pruner::RateDistribution;

pub const PROB_CLAMP: f64 = 1e-20;

#[derive(Debug, Clone)]
pub struct GumbelConfig {
    /// Softmax temperature τ > 0.
    pub temperature: f64,
    /// Use the hard one-hot forward value (gradient still flows through the
    /// soft sample).
    pub hard: bool,
    pub seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { temperature: 1.0, hard: true, seed: 0 }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "gumbel temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One sample: the hard one-hot and the soft relaxation it came from.
#[derive(Debug, Clone)]
pub struct GumbelSample {
    pub y_hard: Vec<f64>,
    pub y_soft: Vec<f64>,
    /// argmax index of y_soft = the selected rate class.
    pub class: usize,
}

/// g_k = −ln(−ln u_k), u_k ~ Uniform(0,1) from the given stream.
pub fn gumbel_noise(k: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..k).map(|_| -(-rng.next_open01().ln()).ln()).collect()
}

fn soft_sample(pi: &[f64], noise: &[f64], temperature: f64) -> (Vec<f64>, usize) {
    let z: Vec<f64> = pi
        .iter()
        .zip(noise.iter())
        .map(|(&p, &g)| (p.max(PROB_CLAMP).ln() + g) / temperature)
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut soft: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = soft.iter().sum();
    soft.iter_mut().for_each(|v| *v /= sum);
    let class = soft
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    (soft, class)
}

/// Sample a rate class. The argmax of the perturbed logits follows π exactly
/// (Gumbel-max), for any temperature.
pub fn gumbel_softmax(pi: &RateDistribution, cfg: &GumbelConfig) -> Result<GumbelSample> {
    cfg.validate()?;
    let k = pi.len();
    let mut rng = SplitMix64::new(cfg.seed);
    let noise = gumbel_noise(k, &mut rng);
    let (y_soft, class) = soft_sample(pi.probs(), &noise, cfg.temperature);
    let mut y_hard = vec![0.0; k];
    y_hard[class] = 1.0;
    Ok(GumbelSample { y_hard, y_soft, class })
}

/// Tape-recorded sample from a π living on the tape. With `cfg.hard`, the
/// forward value is the one-hot and the backward is exactly the soft
/// sample's (straight-through); otherwise the soft sample itself is
/// returned. The noise must be drawn once and reused for any re-evaluation.
pub fn gumbel_softmax_tape(
    tape: &mut GradTape,
    pi: VarId,
    noise: &[f64],
    cfg: &GumbelConfig,
) -> Result<VarId> {
    cfg.validate()?;
    let k = tape.len_of(pi);
    if noise.len() != k {
        return Err(Error::Shape(format!("{} noise values for K={k}", noise.len())));
    }
    let clamped = tape.clamp_min(pi, PROB_CLAMP);
    let logp = tape.ln(clamped)?;
    let g = tape.constant(noise, &[k]);
    let z = tape.add(logp, g)?;
    let scaled = tape.scale(z, 1.0 / cfg.temperature);
    let y_soft = tape.softmax_rows(scaled, 1, k)?;
    if !cfg.hard {
        return Ok(y_soft);
    }
    let soft_vals = tape.value(y_soft).to_vec();
    let class = soft_vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut hard = vec![0.0; k];
    hard[class] = 1.0;
    tape.straight_through(y_soft, &hard)
}
