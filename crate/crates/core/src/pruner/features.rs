//! Attention-distribution features of the current query.

use crate::error::{Error, Result};
use crate::model::{LayerAttention, SegmentKind, TokenSegmentation};

pub const N_SEGMENT_KINDS: usize = 4;

/// Per-head attention mass on each of the four segments, in the fixed order
/// [h0: sys, img, ins, res, h1: sys, ...]. When the query's attention row is
/// normalized, each head's four shares sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    n_heads: usize,
    shares: Vec<f64>,
}

impl FeatureVector {
    pub fn new(n_heads: usize, shares: Vec<f64>) -> Result<Self> {
        if shares.len() != n_heads * N_SEGMENT_KINDS {
            return Err(Error::Shape(format!(
                "feature vector wants {} entries, got {}",
                n_heads * N_SEGMENT_KINDS,
                shares.len()
            )));
        }
        Ok(FeatureVector { n_heads, shares })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.shares
    }

    pub fn share(&self, head: usize, kind: SegmentKind) -> f64 {
        self.shares[head * N_SEGMENT_KINDS + kind.index()]
    }
}

/// Sum the current query's attention row into the four segment buckets, per
/// head. A segment with no keys contributes a share of 0.
pub fn segment_shares(attn: &LayerAttention, seg: &TokenSegmentation) -> Result<FeatureVector> {
    let shape = attn.weights.shape();
    let (n_heads, n_keys) = (shape[0], shape[2]);
    if attn.key_positions.len() != n_keys {
        return Err(Error::Shape("attention keys and positions disagree".into()));
    }
    let mut kinds = Vec::with_capacity(n_keys);
    for &pos in &attn.key_positions {
        let kind = seg.kind_at(pos).ok_or_else(|| {
            Error::Shape(format!("key position {pos} not covered by segmentation"))
        })?;
        kinds.push(kind.index());
    }
    let w = attn.weights.data();
    let mut shares = vec![0.0; n_heads * N_SEGMENT_KINDS];
    for h in 0..n_heads {
        for (j, &kind_ix) in kinds.iter().enumerate() {
            shares[h * N_SEGMENT_KINDS + kind_ix] += w[h * n_keys + j];
        }
    }
    FeatureVector::new(n_heads, shares)
}

/// FastV-style attention-score ranking input: the mean over heads of the
/// current query's attention onto each alive visual token. Returned in key
/// order as (original position, importance); empty when no visual keys
/// remain.
pub fn score_visual_tokens(
    attn: &LayerAttention,
    seg: &TokenSegmentation,
) -> Vec<(usize, f64)> {
    let shape = attn.weights.shape();
    let (n_heads, n_keys) = (shape[0], shape[2]);
    let visual = seg.visual_range();
    let w = attn.weights.data();
    let mut scores = Vec::new();
    for (j, &pos) in attn.key_positions.iter().enumerate() {
        if visual.contains(&pos) {
            let mut acc = 0.0;
            for h in 0..n_heads {
                acc += w[h * n_keys + j];
            }
            scores.push((pos, acc / n_heads as f64));
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{SplitMix64, Tensor};

    fn layer_attn(n_heads: usize, rows: Vec<Vec<f64>>, positions: Vec<usize>) -> LayerAttention {
        let n_keys = positions.len();
        let mut data = Vec::new();
        for row in &rows {
            assert_eq!(row.len(), n_keys);
            data.extend_from_slice(row);
        }
        LayerAttention {
            weights: Tensor::new(vec![n_heads, 1, n_keys], data).unwrap(),
            key_positions: positions,
        }
    }

    #[test]
    fn uniform_attention_over_equal_segments() {
        let mut seg = TokenSegmentation::prompt(2, 2, 2).unwrap();
        seg.push_response();
        seg.push_response();
        let attn = layer_attn(1, vec![vec![0.125; 8]], (0..8).collect());
        let f = segment_shares(&attn, &seg).unwrap();
        for kind in [SegmentKind::Sys, SegmentKind::Img, SegmentKind::Ins, SegmentKind::Res] {
            assert!((f.share(0, kind) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn all_attention_on_visual() {
        let seg = TokenSegmentation::prompt(1, 2, 1).unwrap();
        let attn = layer_attn(2, vec![vec![0.0, 0.5, 0.5, 0.0]; 2], (0..4).collect());
        let f = segment_shares(&attn, &seg).unwrap();
        for h in 0..2 {
            assert_eq!(f.share(h, SegmentKind::Img), 1.0);
            assert_eq!(f.share(h, SegmentKind::Sys), 0.0);
            assert_eq!(f.share(h, SegmentKind::Ins), 0.0);
            assert_eq!(f.share(h, SegmentKind::Res), 0.0);
        }
    }

    #[test]
    fn missing_segment_share_is_zero_not_error() {
        // No res tokens at step 0.
        let seg = TokenSegmentation::prompt(1, 2, 1).unwrap();
        let attn = layer_attn(1, vec![vec![0.25; 4]], (0..4).collect());
        let f = segment_shares(&attn, &seg).unwrap();
        assert_eq!(f.share(0, SegmentKind::Res), 0.0);
    }

    #[test]
    fn shares_match_loop_oracle() {
        // Random 2-head attention over segments of lengths 2/4/2/1.
        let mut seg = TokenSegmentation::prompt(2, 4, 2).unwrap();
        seg.push_response();
        let mut rng = SplitMix64::new(11);
        let mut rows = Vec::new();
        for _ in 0..2 {
            let mut row: Vec<f64> = (0..9).map(|_| rng.uniform(0.0, 1.0)).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            rows.push(row);
        }
        let attn = layer_attn(2, rows.clone(), (0..9).collect());
        let f = segment_shares(&attn, &seg).unwrap();

        // Scalar loop oracle: walk each span and sum its weights directly.
        for (h, row) in rows.iter().enumerate() {
            for &(kind, start, end) in seg.spans() {
                let expect: f64 = row[start..end].iter().sum();
                assert!(
                    (f.share(h, kind) - expect).abs() < 1e-12,
                    "head {h} {kind:?}"
                );
            }
            let total: f64 = (0..N_SEGMENT_KINDS)
                .map(|i| f.values()[h * N_SEGMENT_KINDS + i])
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_head_scores_are_identity() {
        let seg = TokenSegmentation::prompt(0, 3, 0).unwrap();
        let attn = layer_attn(1, vec![vec![0.5, 0.3, 0.2]], vec![0, 1, 2]);
        let s = score_visual_tokens(&attn, &seg);
        assert_eq!(s, vec![(0, 0.5), (1, 0.3), (2, 0.2)]);
    }

    #[test]
    fn two_head_scores_are_means() {
        let seg = TokenSegmentation::prompt(0, 2, 0).unwrap();
        let attn = layer_attn(2, vec![vec![0.6, 0.4], vec![0.2, 0.8]], vec![0, 1]);
        let s = score_visual_tokens(&attn, &seg);
        assert!((s[0].1 - 0.4).abs() < 1e-12);
        assert!((s[1].1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn scores_match_column_mean_oracle() {
        let seg = TokenSegmentation::prompt(1, 4, 1).unwrap();
        let mut rng = SplitMix64::new(5);
        let rows: Vec<Vec<f64>> =
            (0..4).map(|_| (0..6).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let attn = layer_attn(4, rows.clone(), (0..6).collect());
        let s = score_visual_tokens(&attn, &seg);
        assert_eq!(s.len(), 4);
        for (ix, &(pos, score)) in s.iter().enumerate() {
            assert_eq!(pos, 1 + ix);
            let mean: f64 = rows.iter().map(|r| r[pos]).sum::<f64>() / 4.0;
            assert!((score - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn no_visual_segment_gives_empty_scores() {
        let mut seg = TokenSegmentation::prompt(0, 1, 0).unwrap();
        seg.push_response();
        // Keys exclude the only visual position.
        let attn = layer_attn(1, vec![vec![1.0]], vec![1]);
        assert!(score_visual_tokens(&attn, &seg).is_empty());
    }
}
