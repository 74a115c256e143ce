//! Candidate keep-masks per discrete rate, mask mixing, and the final
//! per-query attention mask.

use crate::error::{Error, Result};
use crate::model::TokenSegmentation;
use crate::numerics::Tensor;
use crate::pruner::RateSet;

/// K nested keep-vectors over a key domain: mask k drops exactly
/// floor((k−1)·N/K) of the least important visual tokens, N being the number
/// of visual keys in the domain. Non-visual keys are kept by every mask.
#[derive(Debug, Clone)]
pub struct CandidateMaskSet {
    /// Key positions the masks index, strictly increasing.
    positions: Vec<usize>,
    /// masks[k][j] ∈ {0.0, 1.0}; masks[0] is all ones.
    masks: Vec<Vec<f64>>,
    drop_counts: Vec<usize>,
    n_visual: usize,
}

impl CandidateMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn mask(&self, idx: usize) -> &[f64] {
        &self.masks[idx]
    }

    pub fn drop_counts(&self) -> &[usize] {
        &self.drop_counts
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    /// Row-major [K, n_keys] view for mask mixing on a tape.
    pub fn as_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.masks.len() * self.positions.len());
        for m in &self.masks {
            out.extend_from_slice(m);
        }
        out
    }
}

/// Build the K candidate masks over the key domain `positions`.
/// `importance` holds (position, score) for every visual key in the domain;
/// the least important visual tokens are dropped first, ties breaking toward
/// keeping lower original positions.
pub fn build_candidate_masks(
    importance: &[(usize, f64)],
    seg: &TokenSegmentation,
    positions: &[usize],
    k: usize,
) -> Result<CandidateMaskSet> {
    let rates = RateSet::new(k)?;
    let visual = seg.visual_range();
    let visual_keys: Vec<usize> =
        positions.iter().copied().filter(|p| visual.contains(p)).collect();
    let n_visual = visual_keys.len();
    if importance.len() != n_visual
        || !importance.iter().zip(visual_keys.iter()).all(|(&(p, _), &q)| p == q)
    {
        return Err(Error::Shape(
            "importance scores must cover exactly the visual keys, in key order".into(),
        ));
    }

    // Descending by score; equal scores keep the lower position first, which
    // means the higher position is dropped first.
    let mut ranked: Vec<(usize, f64)> = importance.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));

    let index_of: std::collections::HashMap<usize, usize> =
        positions.iter().enumerate().map(|(j, &p)| (p, j)).collect();

    let mut masks = Vec::with_capacity(k);
    let mut drop_counts = Vec::with_capacity(k);
    for idx in 0..k {
        let drop = rates.drop_count(idx, n_visual);
        let mut mask = vec![1.0; positions.len()];
        for &(pos, _) in ranked.iter().rev().take(drop) {
            mask[index_of[&pos]] = 0.0;
        }
        drop_counts.push(drop);
        masks.push(mask);
    }
    Ok(CandidateMaskSet { positions: positions.to_vec(), masks, drop_counts, n_visual })
}

/// m = Σ_k y_k · m^k. With a hard one-hot y this selects one candidate mask
/// exactly; with a soft y it is their convex combination.
pub fn mix_masks(y: &[f64], cms: &CandidateMaskSet) -> Result<Vec<f64>> {
    if y.len() != cms.len() {
        return Err(Error::Shape(format!(
            "mix_masks: {} weights for {} masks",
            y.len(),
            cms.len()
        )));
    }
    let n = cms.positions().len();
    let mut out = vec![0.0; n];
    for (yk, mask) in y.iter().zip(cms.masks.iter()) {
        if *yk == 0.0 {
            continue;
        }
        for (o, m) in out.iter_mut().zip(mask.iter()) {
            *o += yk * m;
        }
    }
    Ok(out)
}

/// Expand a keep-vector into the per-query attention mask: every query keeps
/// its own key position; other keys follow the keep-vector; with `causal`,
/// keys after the query's position are masked. Queries are the last n_q
/// positions of the key domain.
pub fn compose_attention_mask(m: &[f64], n_q: usize, n_k: usize, causal: bool) -> Result<Tensor> {
    if m.len() != n_k {
        return Err(Error::Shape(format!(
            "keep-vector covers {} keys, mask wants {n_k}",
            m.len()
        )));
    }
    if n_q > n_k {
        return Err(Error::Shape(format!("more queries ({n_q}) than keys ({n_k})")));
    }
    let mut data = vec![0.0; n_q * n_k];
    for q in 0..n_q {
        let qpos = n_k - n_q + q;
        for j in 0..n_k {
            let v = if j == qpos {
                1.0
            } else if causal && j > qpos {
                0.0
            } else {
                m[j]
            };
            data[q * n_k + j] = v;
        }
    }
    Tensor::new(vec![n_q, n_k], data)
}
