//! Fixed-rate baseline strategies.

use crate::model::TokenSegmentation;

/// Keep-vector over `positions` dropping the `drop_count` least important
/// visual keys; ties drop the higher original position first. Non-visual
/// keys are always kept.
pub(crate) fn keep_vector_dropping_least(
    importance: &[(usize, f64)],
    positions: &[usize],
    drop_count: usize,
) -> Vec<f64> {
    let mut ranked: Vec<(usize, f64)> = importance.to_vec();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    let dropped: std::collections::HashSet<usize> =
        ranked.iter().rev().take(drop_count).map(|&(p, _)| p).collect();
    positions.iter().map(|p| if dropped.contains(p) { 0.0 } else { 1.0 }).collect()
}

/// FastV: drop floor(R·N) of the least important visual keys, where N is
/// the number of visual keys scored. Decided once, at the first generation
/// step, and fixed thereafter.
pub fn fastv_keep_vector(
    importance: &[(usize, f64)],
    _seg: &TokenSegmentation,
    rate: f64,
    positions: &[usize],
) -> Vec<f64> {
    let n = importance.len();
    let drop = (rate * n as f64).floor() as usize;
    keep_vector_dropping_least(importance, positions, drop)
}

/// VTW: zero every visual key, keep everything else.
pub fn vtw_keep_vector(seg: &TokenSegmentation, positions: &[usize]) -> Vec<f64> {
    let visual = seg.visual_range();
    positions.iter().map(|p| if visual.contains(p) { 0.0 } else { 1.0 }).collect()
}

/// Depth-based retain fraction
/// C_retain = 1 − H(L−4)·P_prune_4th − H(L−4)·R′, clamped to [0, 1],
/// with H the Heaviside step, H(0) = 1, and L the 1-based layer number.
/// Both subtractions share the same gate, exactly as specified; layer 4 is
/// the first pruned layer.
pub fn dp_retain_fraction(l_index: usize, p_prune_4th: f64, r_prime: f64) -> f64 {
    let h = if l_index >= 4 { 1.0 } else { 0.0 };
    (1.0 - h * p_prune_4th - h * r_prime).clamp(0.0, 1.0)
}
