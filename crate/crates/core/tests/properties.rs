//! Property tests for the numeric and combinatorial invariants.

use proptest::prelude::*;

use dyrate_core::model::{attention_with_mask, SegmentKind, TokenSegmentation};
use dyrate_core::numerics::{softmax, GradTape, SplitMix64, Tensor};
use dyrate_core::pruner::{build_candidate_masks, compose_attention_mask, mix_masks};
use dyrate_core::workload::{read_trace, write_trace, AttentionTrace, TraceRecord};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-30.0f64..30.0, len..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to 1 and are invariant under adding a constant.
    #[test]
    fn softmax_normalized_and_shift_invariant(
        vals in finite_vec(6),
        shift in -15.0f64..15.0,
    ) {
        let x = Tensor::new(vec![2, 3], vals.clone()).unwrap();
        let y = softmax(&x, 1).unwrap();
        for row in 0..2 {
            let s: f64 = y.data()[row * 3..(row + 1) * 3].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::new(vec![2, 3], vals.iter().map(|v| v + shift).collect()).unwrap();
        let y2 = softmax(&shifted, 1).unwrap();
        for (a, b) in y.data().iter().zip(y2.data().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Masking keys to zero weight equals physically deleting them.
    #[test]
    fn masking_matches_deletion(
        seed in 0u64..5000,
        n_keys in 2usize..8,
        drop_bits in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let mut rng = SplitMix64::new(seed);
        let dh = 4usize;
        let mk = |rng: &mut SplitMix64, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
        };
        let q = Tensor::new(vec![1, dh], mk(&mut rng, dh)).unwrap();
        let kd = mk(&mut rng, n_keys * dh);
        let vd = mk(&mut rng, n_keys * dh);
        let mut mask: Vec<f64> =
            (0..n_keys).map(|j| if drop_bits[j] { 0.0 } else { 1.0 }).collect();
        // Keep at least the last key (the query's own position).
        mask[n_keys - 1] = 1.0;

        let k = Tensor::new(vec![n_keys, dh], kd.clone()).unwrap();
        let v = Tensor::new(vec![n_keys, dh], vd.clone()).unwrap();
        let m = Tensor::new(vec![1, n_keys], mask.clone()).unwrap();
        let (out_masked, w) = attention_with_mask(&q, &k, &v, &m).unwrap();

        let keep: Vec<usize> = (0..n_keys).filter(|&j| mask[j] > 0.0).collect();
        let kdel: Vec<f64> = keep.iter().flat_map(|&j| kd[j * dh..(j + 1) * dh].to_vec()).collect();
        let vdel: Vec<f64> = keep.iter().flat_map(|&j| vd[j * dh..(j + 1) * dh].to_vec()).collect();
        let k2 = Tensor::new(vec![keep.len(), dh], kdel).unwrap();
        let v2 = Tensor::new(vec![keep.len(), dh], vdel).unwrap();
        let m2 = Tensor::new(vec![1, keep.len()], vec![1.0; keep.len()]).unwrap();
        let (out_deleted, _) = attention_with_mask(&q, &k2, &v2, &m2).unwrap();

        for (a, b) in out_masked.data().iter().zip(out_deleted.data().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // Masked weights are exactly zero and the rest sum to 1.
        let wsum: f64 = w.data().iter().sum();
        prop_assert!((wsum - 1.0).abs() < 1e-12);
        for j in 0..n_keys {
            if mask[j] == 0.0 {
                prop_assert_eq!(w.data()[j], 0.0);
            }
        }
    }

    /// Candidate masks: nested keep-sets, exact floor drop counts, and
    /// untouchable non-visual positions, for arbitrary scores.
    #[test]
    fn candidate_masks_nested(
        n_visual in 1usize..20,
        k in 2usize..8,
        n_text in 0usize..4,
        seed in 0u64..10_000,
    ) {
        let seg = TokenSegmentation::prompt(n_text, n_visual, n_text).unwrap();
        let positions: Vec<usize> = (0..seg.seq_len()).collect();
        let mut rng = SplitMix64::new(seed);
        let importance: Vec<(usize, f64)> = seg
            .visual_range()
            .map(|p| (p, (rng.below(5)) as f64 * 0.25))
            .collect();
        let cms = build_candidate_masks(&importance, &seg, &positions, k).unwrap();
        let mut prev: Option<Vec<usize>> = None;
        for idx in 0..k {
            prop_assert_eq!(cms.drop_counts()[idx], idx * n_visual / k);
            let keep: Vec<usize> = positions
                .iter()
                .zip(cms.mask(idx).iter())
                .filter(|(_, &m)| m > 0.0)
                .map(|(&p, _)| p)
                .collect();
            for (&p, &m) in positions.iter().zip(cms.mask(idx).iter()) {
                if !seg.visual_range().contains(&p) {
                    prop_assert_eq!(m, 1.0);
                }
            }
            if let Some(prev_keep) = &prev {
                prop_assert!(keep.iter().all(|p| prev_keep.contains(p)));
            }
            prev = Some(keep);
        }
    }

    /// Mixing with a one-hot selects the candidate exactly; a convex soft
    /// mix stays within [0, 1] and keeps non-visual positions at 1.
    #[test]
    fn mask_mixing_convexity(
        seed in 0u64..10_000,
        hot in 0usize..4,
        alpha in 0.0f64..1.0,
    ) {
        let seg = TokenSegmentation::prompt(1, 6, 1).unwrap();
        let positions: Vec<usize> = (0..seg.seq_len()).collect();
        let mut rng = SplitMix64::new(seed);
        let importance: Vec<(usize, f64)> =
            seg.visual_range().map(|p| (p, rng.next_f64())).collect();
        let cms = build_candidate_masks(&importance, &seg, &positions, 4).unwrap();

        let mut onehot = vec![0.0; 4];
        onehot[hot] = 1.0;
        prop_assert_eq!(mix_masks(&onehot, &cms).unwrap(), cms.mask(hot).to_vec());

        let soft = vec![alpha / 2.0, (1.0 - alpha) / 2.0, alpha / 2.0, (1.0 - alpha) / 2.0];
        let mixed = mix_masks(&soft, &cms).unwrap();
        for (&p, &m) in positions.iter().zip(mixed.iter()) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
            if !seg.visual_range().contains(&p) {
                prop_assert!((m - 1.0).abs() < 1e-12);
            }
        }
    }

    /// The composed attention mask always keeps the diagonal and never
    /// exposes future keys.
    #[test]
    fn composed_mask_diagonal_and_causality(
        n_k in 1usize..10,
        seed in 0u64..1000,
    ) {
        let mut rng = SplitMix64::new(seed);
        let keep: Vec<f64> = (0..n_k).map(|_| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 }).collect();
        let n_q = 1 + rng.below(n_k);
        let t = compose_attention_mask(&keep, n_q, n_k, true).unwrap();
        for q in 0..n_q {
            let qpos = n_k - n_q + q;
            for j in 0..n_k {
                let v = t.data()[q * n_k + j];
                if j == qpos {
                    prop_assert_eq!(v, 1.0);
                } else if j > qpos {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert_eq!(v, keep[j]);
                }
            }
        }
    }

    /// Trace files round-trip bit-exactly for arbitrary shapes.
    #[test]
    fn trace_round_trip_property(
        seed in 0u64..5000,
        n_heads in 1usize..4,
        n_steps in 0usize..4,
    ) {
        let mut rng = SplitMix64::new(seed);
        let mut seg = TokenSegmentation::prompt(1, 2, 1).unwrap();
        for _ in 0..n_steps {
            seg.push_response();
        }
        let mut records = Vec::new();
        for step in 1..=n_steps {
            let n_keys = 4 + step;
            let mut rows = Vec::new();
            for _ in 0..n_heads {
                let mut row: Vec<f32> = (0..n_keys).map(|_| rng.uniform(0.01, 1.0) as f32).collect();
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                rows.extend_from_slice(&row);
            }
            records.push(TraceRecord {
                step,
                layer: 0,
                positions: (0..n_keys as u32).collect(),
                rows,
            });
        }
        let trace = AttentionTrace {
            n_heads,
            n_layers: 1,
            n_steps,
            segmentation: seg,
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dytr");
        write_trace(&path, &trace).unwrap();
        prop_assert_eq!(read_trace(&path).unwrap(), trace);
    }

    /// Gradient of a random composite stays within the documented bound.
    #[test]
    fn tape_gradients_match_finite_differences(
        seed in 0u64..2000,
    ) {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::new(vec![2, 4], data).unwrap();
        let err = dyrate_core::numerics::grad_check(
            |tape: &mut GradTape, xv| {
                let wv = tape.constant(&w, &[4, 2]);
                let h = tape.matmul(xv, wv, 2, 4, 2)?;
                let act = tape.gelu(h);
                let sm = tape.softmax_rows(act, 2, 2)?;
                let c = tape.constant(&[0.3, -0.7, 0.5, 0.2], &[4]);
                tape.dot(sm, c)
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "rel error {}", err);
    }
}

/// Feature normalization: shares per head sum to 1 whenever the attention
/// row is normalized, for any segmentation layout.
#[test]
fn feature_shares_sum_to_one() {
    use dyrate_core::model::LayerAttention;
    use dyrate_core::pruner::segment_shares;
    for seed in 0..50u64 {
        let mut rng = SplitMix64::new(seed);
        let n_sys = rng.below(3);
        let n_img = 1 + rng.below(5);
        let n_ins = rng.below(3);
        let steps = 1 + rng.below(4);
        let mut seg = TokenSegmentation::prompt(n_sys, n_img, n_ins).unwrap();
        for _ in 0..steps {
            seg.push_response();
        }
        let n_keys = seg.seq_len();
        let n_heads = 1 + rng.below(4);
        let mut rows = Vec::new();
        for _ in 0..n_heads {
            let mut row: Vec<f64> = (0..n_keys).map(|_| rng.uniform(0.0, 1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            rows.extend_from_slice(&row);
        }
        let attn = LayerAttention {
            weights: Tensor::new(vec![n_heads, 1, n_keys], rows).unwrap(),
            key_positions: (0..n_keys).collect(),
        };
        let f = segment_shares(&attn, &seg).unwrap();
        for h in 0..n_heads {
            let total: f64 = [
                SegmentKind::Sys,
                SegmentKind::Img,
                SegmentKind::Ins,
                SegmentKind::Res,
            ]
            .iter()
            .map(|&k| f.share(h, k))
            .sum();
            assert!((total - 1.0).abs() < 1e-9, "seed {seed} head {h}: {total}");
        }
    }
}
