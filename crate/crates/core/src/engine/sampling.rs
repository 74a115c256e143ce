//! Greedy and nucleus (top-p) token selection.

use crate::numerics::SplitMix64;

/// Argmax over logits; ties go to the lower token id.
pub fn greedy(logits: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Nucleus sampling: softmax the logits, take the smallest probability-sorted
/// prefix with cumulative mass >= p, renormalize, and draw from it.
pub fn top_p(logits: &[f64], p: f64, rng: &mut SplitMix64) -> usize {
    debug_assert!(p > 0.0 && p <= 1.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> =
        logits.iter().enumerate().map(|(i, &l)| (i, (l - max).exp())).collect();
    let sum: f64 = probs.iter().map(|(_, e)| e).sum();
    for (_, e) in probs.iter_mut() {
        *e /= sum;
    }
    // Descending probability, ascending id on ties, for a deterministic set.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));

    let mut cum = 0.0;
    let mut cut = probs.len();
    for (ix, (_, q)) in probs.iter().enumerate() {
        cum += q;
        if cum >= p {
            cut = ix + 1;
            break;
        }
    }
    let nucleus = &probs[..cut];
    let mass: f64 = nucleus.iter().map(|(_, q)| q).sum();
    let draw = rng.next_f64() * mass;
    let mut acc = 0.0;
    for (id, q) in nucleus {
        acc += q;
        if draw < acc {
            return *id;
        }
    }
    nucleus[nucleus.len() - 1].0
}
