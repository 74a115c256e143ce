//! The linear rate classifier C_θ: attention-share features in, a softmax
//! distribution over the K discrete compression rates out.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ioutil;
use crate::numerics::linalg::matmul_tb_kernel;
use crate::numerics::{GradTape, VarId};
use crate::pruner::features::{FeatureVector, N_SEGMENT_KINDS};

const CKPT_FORMAT_VERSION: u32 = 1;

/// Probabilities over the K rates; nonnegative and summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RateDistribution {
    probs: Vec<f64>,
}

impl RateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Shape("rate distribution needs K >= 2".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::NonFinite("rate distribution".into()));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Shape(format!("rate distribution sums to {sum}")));
        }
        Ok(RateDistribution { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// E\[r\] = Σ_k π_k r_k with r_k = (k−1)/K.
    pub fn expected_rate(&self) -> f64 {
        let k = self.probs.len();
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * (i as f64 / k as f64))
            .sum()
    }
}

/// Weights of the linear classifier: logits = weight · v + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub k: usize,
    pub n_heads: usize,
    /// Row-major [K, n_heads * 4].
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PredictorParams {
    pub fn n_features(&self) -> usize {
        self.n_heads * N_SEGMENT_KINDS
    }

    /// Zero weights with a bias favoring r_1 (keep-all): logit +2 on class 1.
    pub fn keep_all_init(k: usize, n_heads: usize) -> Result<Self> {
        if k < 2 || n_heads == 0 {
            return Err(Error::Config("predictor needs K >= 2 and H >= 1".into()));
        }
        let mut bias = vec![0.0; k];
        bias[0] = 2.0;
        Ok(PredictorParams { k, n_heads, weight: vec![0.0; k * n_heads * N_SEGMENT_KINDS], bias })
    }

    /// A predictor pinned to r_1 = 0 for the keep-all identity checks.
    pub fn forced_keep_all(k: usize, n_heads: usize) -> Result<Self> {
        let mut p = Self::keep_all_init(k, n_heads)?;
        p.bias[0] = 50.0;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.k * self.n_features() || self.bias.len() != self.k {
            return Err(Error::Shape("predictor weight/bias sizes inconsistent".into()));
        }
        if !self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("predictor parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let feature_order: Vec<String> = (0..self.n_heads)
            .flat_map(|h| {
                ["sys", "img", "ins", "res"].iter().map(move |s| format!("h{h}.{s}"))
            })
            .collect();
        let header = serde_json::json!({
            "format_version": CKPT_FORMAT_VERSION,
            "kind": "predictor",
            "k": self.k,
            "n_heads": self.n_heads,
            "feature_order": feature_order,
        });
        let mut data = self.weight.clone();
        data.extend_from_slice(&self.bias);
        ioutil::write_header_and_f64s(path, &header, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = ioutil::read_header_and_f64s(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("predictor") {
            return Err(Error::Format("not a predictor checkpoint".into()));
        }
        let k = header.get("k").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Format("predictor checkpoint missing K".into())
        })? as usize;
        let n_heads = header.get("n_heads").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Format("predictor checkpoint missing n_heads".into())
        })? as usize;
        let n_feat = n_heads * N_SEGMENT_KINDS;
        if data.len() != k * n_feat + k {
            return Err(Error::Format("predictor payload size mismatch".into()));
        }
        let p = PredictorParams {
            k,
            n_heads,
            weight: data[..k * n_feat].to_vec(),
            bias: data[k * n_feat..].to_vec(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// π_R = softmax(weight · v + bias).
pub fn predict_rate_distribution(
    v: &FeatureVector,
    p: &PredictorParams,
) -> Result<RateDistribution> {
    p.validate()?;
    if v.len() != p.n_features() {
        return Err(Error::Shape(format!(
            "feature vector has {} entries, predictor wants {}",
            v.len(),
            p.n_features()
        )));
    }
    let k = p.k;
    let mut logits = vec![0.0; k];
    matmul_tb_kernel(v.values(), &p.weight, &mut logits, 1, p.n_features(), k);
    for (l, b) in logits.iter_mut().zip(p.bias.iter()) {
        *l += b;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    RateDistribution::new(probs)
}

/// Tape version: features may be a constant or a differentiable value; the
/// result is differentiable w.r.t. weight, bias, and the features.
pub fn predict_rate_distribution_tape(
    tape: &mut GradTape,
    features: VarId,
    weight: VarId,
    bias: VarId,
    k: usize,
) -> Result<VarId> {
    let n_feat = tape.len_of(features);
    if tape.len_of(weight) != k * n_feat || tape.len_of(bias) != k {
        return Err(Error::Shape("predictor tape dims mismatch".into()));
    }
    let logits = tape.matmul_tb(features, weight, 1, n_feat, k)?;
    let shifted = tape.add(logits, bias)?;
    tape.softmax_rows(shifted, 1, k)
}
