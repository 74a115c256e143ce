//! The pruning-aware generation loop.
//!
//! Per step: decode layer by layer; at the decision layer, read the current
//! query's attention, pick a keep-vector (predictor + Gumbel for DyRate,
//! fixed rules for the baselines), then either compact the KV cache of the
//! pruned layers (infer-hard) or fold the decision into the multiplicative
//! masks (train-soft). Deeper layers of the same step already see the
//! decision; the decision layer itself sees it from the next step.

use std::collections::HashSet;

use crate::costing;
use crate::error::{Error, Result};
use crate::model::{
    AttentionMaps, DecodeSession, KVCache, LayerAttention, Params, TokenSegmentation,
};
use crate::numerics::SplitMix64;
use crate::pruner::{
    build_candidate_masks, gumbel_softmax, mix_masks, predict_rate_distribution,
    score_visual_tokens, segment_shares, GumbelConfig, PredictorParams, RateSet,
};

use super::baselines::{dp_retain_fraction, keep_vector_dropping_least, vtw_keep_vector};
use super::sampling::{greedy, top_p};
use super::schedule::{PruneSchedule, StepRecord};
use super::{DecodeConfig, DecodeStrategy, PruneStrategy};

/// Training applies the mask softly; inference discards tokens outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    TrainSoft,
    InferHard,
}

impl PruneMode {
    fn as_str(self) -> &'static str {
        match self {
            PruneMode::TrainSoft => "train-soft",
            PruneMode::InferHard => "infer-hard",
        }
    }
}

/// Callback fed each step's attention maps and logits, e.g. for trace
/// files or fine-grained run comparisons.
pub trait StepObserver {
    fn on_step(
        &mut self,
        step: usize,
        attention: &AttentionMaps,
        logits: &[f64],
        seg: &TokenSegmentation,
    );
}

/// Drop entries with m = 0 from every layer at or beyond `from_layer`.
/// `m` is aligned with the keys of layer `from_layer`; deeper layers are
/// matched by original position. Survivor positions keep their values.
pub fn hard_prune_step(cache: &mut KVCache, m: &[f64], from_layer: usize) -> Result<()> {
    let n_layers = cache.layers.len();
    if from_layer >= n_layers {
        return Ok(());
    }
    if m.len() != cache.layers[from_layer].len() {
        return Err(Error::Shape(format!(
            "keep-vector covers {} keys, layer {from_layer} holds {}",
            m.len(),
            cache.layers[from_layer].len()
        )));
    }
    let dropped: HashSet<usize> = cache.layers[from_layer]
        .positions
        .iter()
        .zip(m.iter())
        .filter(|(_, &keep)| keep == 0.0)
        .map(|(&p, _)| p)
        .collect();
    if dropped.is_empty() {
        return Ok(());
    }
    let d_model = cache.d_model();
    for l in from_layer..n_layers {
        let keep: Vec<bool> =
            cache.layers[l].positions.iter().map(|p| !dropped.contains(p)).collect();
        cache.layers[l].retain(&keep, d_model);
    }
    Ok(())
}

/// What one step's strategy decision resolved to.
struct StepDecision {
    rate: f64,
    pi: Option<Vec<f64>>,
    /// (layer, dropped original positions); uniform strategies touch every
    /// layer >= their k_layer with the same set.
    drops: Vec<(usize, Vec<usize>)>,
}

struct LoopState {
    /// Cumulative keep factor per layer per original position (soft mode).
    keep_by_pos: Vec<Vec<f64>>,
    mode: PruneMode,
}

impl LoopState {
    fn layer_mask(&self, cache: &KVCache, layer: usize) -> Vec<f64> {
        // Mask covers the layer's keys *after* the pending append, so the
        // final slot is the query's own position, always kept.
        let mut mask: Vec<f64> = match self.mode {
            PruneMode::InferHard => vec![1.0; cache.layers[layer].len()],
            PruneMode::TrainSoft => cache.layers[layer]
                .positions
                .iter()
                .map(|&p| self.keep_by_pos[layer][p])
                .collect(),
        };
        mask.push(1.0);
        mask
    }

    fn apply_drops(&mut self, cache: &mut KVCache, drops: &[(usize, Vec<usize>)]) -> Result<()> {
        match self.mode {
            PruneMode::InferHard => {
                let d_model = cache.d_model();
                for (layer, positions) in drops {
                    if positions.is_empty() {
                        continue;
                    }
                    let drop_set: HashSet<usize> = positions.iter().copied().collect();
                    let keep: Vec<bool> = cache.layers[*layer]
                        .positions
                        .iter()
                        .map(|p| !drop_set.contains(p))
                        .collect();
                    cache.layers[*layer].retain(&keep, d_model);
                }
            }
            PruneMode::TrainSoft => {
                for (layer, positions) in drops {
                    for &p in positions {
                        self.keep_by_pos[*layer][p] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_token(logits: &[f64], cfg: &DecodeConfig, step: usize) -> usize {
    match &cfg.strategy {
        DecodeStrategy::Greedy => greedy(logits),
        DecodeStrategy::TopP { p, seed } => {
            let mut rng = SplitMix64::stream(*seed, step as u64);
            top_p(logits, *p, &mut rng)
        }
    }
}

/// Alive visual keys (position, importance) under the mask used this step.
fn alive_visual_scores(
    attn: &LayerAttention,
    seg: &TokenSegmentation,
    mask: &[f64],
) -> Vec<(usize, f64)> {
    let alive: HashSet<usize> = attn
        .key_positions
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m > 0.0)
        .map(|(&p, _)| p)
        .collect();
    score_visual_tokens(attn, seg)
        .into_iter()
        .filter(|(p, _)| alive.contains(p))
        .collect()
}

fn alive_positions(attn: &LayerAttention, mask: &[f64]) -> Vec<usize> {
    attn.key_positions
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m > 0.0)
        .map(|(&p, _)| p)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn decide(
    strat: &PruneStrategy,
    step: usize,
    attn: &LayerAttention,
    mask: &[f64],
    seg: &TokenSegmentation,
    cfg: &DecodeConfig,
    predictor: Option<&PredictorParams>,
    n_layers: usize,
    n_visual_original: usize,
) -> Result<Option<StepDecision>> {
    let apply_span = |from: usize, dropped: Vec<usize>| -> Vec<(usize, Vec<usize>)> {
        (from..n_layers).map(|l| (l, dropped.clone())).collect()
    };
    match strat {
        PruneStrategy::None => Ok(None),
        PruneStrategy::DyRate => {
            let predictor = predictor.ok_or_else(|| {
                Error::Config("dyrate strategy requires a predictor".into())
            })?;
            let features = segment_shares(attn, seg)?;
            let pi = predict_rate_distribution(&features, predictor)?;
            let scores = alive_visual_scores(attn, seg, mask);
            let domain = alive_positions(attn, mask);
            let cms = build_candidate_masks(&scores, seg, &domain, cfg.rate_classes)?;
            let step_seed = SplitMix64::stream(cfg.gumbel.seed, step as u64).next_u64();
            let sample = gumbel_softmax(
                &pi,
                &GumbelConfig { temperature: cfg.gumbel.temperature, hard: true, seed: step_seed },
            )?;
            let m = mix_masks(&sample.y_hard, &cms)?;
            let dropped: Vec<usize> = domain
                .iter()
                .zip(m.iter())
                .filter(|(_, &keep)| keep == 0.0)
                .map(|(&p, _)| p)
                .collect();
            let rates = RateSet::new(cfg.rate_classes)?;
            Ok(Some(StepDecision {
                rate: rates.rate(sample.class),
                pi: Some(pi.probs().to_vec()),
                drops: apply_span(cfg.prune_layer, dropped),
            }))
        }
        PruneStrategy::FastV { k_layer, rate } => {
            if step != 1 {
                return Ok(None);
            }
            let scores = alive_visual_scores(attn, seg, mask);
            let n = scores.len();
            let drop = (*rate * n as f64).floor() as usize;
            let domain = alive_positions(attn, mask);
            let keep = keep_vector_dropping_least(&scores, &domain, drop);
            let dropped: Vec<usize> = domain
                .iter()
                .zip(keep.iter())
                .filter(|(_, &k)| k == 0.0)
                .map(|(&p, _)| p)
                .collect();
            let realized = if n > 0 { dropped.len() as f64 / n as f64 } else { 0.0 };
            Ok(Some(StepDecision { rate: realized, pi: None, drops: apply_span(*k_layer, dropped) }))
        }
        PruneStrategy::Vtw { k_layer } => {
            if step != 1 {
                return Ok(None);
            }
            let domain = alive_positions(attn, mask);
            let keep = vtw_keep_vector(seg, &domain);
            let dropped: Vec<usize> = domain
                .iter()
                .zip(keep.iter())
                .filter(|(_, &k)| k == 0.0)
                .map(|(&p, _)| p)
                .collect();
            Ok(Some(StepDecision { rate: 1.0, pi: None, drops: apply_span(*k_layer, dropped) }))
        }
        PruneStrategy::Fp { rate, k_layer } => {
            let scores = alive_visual_scores(attn, seg, mask);
            let alive = scores.len();
            let target_drop = (*rate * n_visual_original as f64).floor() as usize;
            let already = n_visual_original.saturating_sub(alive);
            let new_drop = target_drop.saturating_sub(already).min(alive);
            if new_drop == 0 {
                return Ok(None);
            }
            let domain = alive_positions(attn, mask);
            let keep = keep_vector_dropping_least(&scores, &domain, new_drop);
            let dropped: Vec<usize> = domain
                .iter()
                .zip(keep.iter())
                .filter(|(_, &k)| k == 0.0)
                .map(|(&p, _)| p)
                .collect();
            let realized = if alive > 0 { dropped.len() as f64 / alive as f64 } else { 0.0 };
            Ok(Some(StepDecision { rate: realized, pi: None, drops: apply_span(*k_layer, dropped) }))
        }
        PruneStrategy::Dp { p_prune_4th, r_prime } => {
            if step != 1 {
                return Ok(None);
            }
            let scores = alive_visual_scores(attn, seg, mask);
            let n = scores.len();
            let domain = alive_positions(attn, mask);
            let mut drops = Vec::new();
            let mut reference_rate = 0.0;
            for l in 0..n_layers {
                let retain = dp_retain_fraction(l + 1, *p_prune_4th, *r_prime);
                let drop = ((1.0 - retain) * n as f64).floor() as usize;
                if drop == 0 {
                    continue;
                }
                if l + 1 == 4 {
                    reference_rate = 1.0 - retain;
                }
                let keep = keep_vector_dropping_least(&scores, &domain, drop);
                let dropped: Vec<usize> = domain
                    .iter()
                    .zip(keep.iter())
                    .filter(|(_, &k)| k == 0.0)
                    .map(|(&p, _)| p)
                    .collect();
                drops.push((l, dropped));
            }
            Ok(Some(StepDecision { rate: reference_rate, pi: None, drops }))
        }
    }
}

/// 0-based layer whose attention drives the strategy's decision; also the
/// first layer it prunes.
fn decision_layer(strat: &PruneStrategy, cfg: &DecodeConfig, n_layers: usize) -> Option<usize> {
    let l = match strat {
        PruneStrategy::None => return None,
        PruneStrategy::DyRate => cfg.prune_layer,
        PruneStrategy::FastV { k_layer, .. } => *k_layer,
        PruneStrategy::Vtw { k_layer } => *k_layer,
        PruneStrategy::Fp { k_layer, .. } => *k_layer,
        // DP's formula pins layer 4 (1-based) as the first pruned layer.
        PruneStrategy::Dp { .. } => 3,
    };
    (l < n_layers).then_some(l)
}

/// Generate `cfg.max_new_tokens` tokens under a pruning strategy, recording
/// every decision. The prompt is never pruned.
pub fn generate(
    params: &Params,
    predictor: Option<&PredictorParams>,
    prompt: &[usize],
    seg: &TokenSegmentation,
    cfg: &DecodeConfig,
    strat: &PruneStrategy,
    mode: PruneMode,
) -> Result<(Vec<usize>, PruneSchedule)> {
    generate_observed(params, predictor, prompt, seg, cfg, strat, mode, None)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_observed(
    params: &Params,
    predictor: Option<&PredictorParams>,
    prompt: &[usize],
    seg: &TokenSegmentation,
    cfg: &DecodeConfig,
    strat: &PruneStrategy,
    mode: PruneMode,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<(Vec<usize>, PruneSchedule)> {
    let n_layers = params.config.n_layers;
    params.config.validate()?;
    cfg.validate(n_layers)?;
    strat.validate(n_layers)?;
    if matches!(strat, PruneStrategy::DyRate) != predictor.is_some() {
        return Err(Error::Config(
            "predictor must be supplied exactly when the strategy is dyrate".into(),
        ));
    }
    if seg.seq_len() != prompt.len() {
        return Err(Error::Config(format!(
            "segmentation covers {} positions, prompt has {}",
            seg.seq_len(),
            prompt.len()
        )));
    }
    if prompt.len() + cfg.max_new_tokens > params.config.max_seq {
        return Err(Error::SeqOverflow {
            len: prompt.len() + cfg.max_new_tokens,
            max_seq: params.config.max_seq,
        });
    }

    let n_visual = seg.visual_range().len();
    let mut cache = KVCache::new(&params.config);
    let mut last_logits = crate::model::prefill(params, prompt, &mut cache)?;
    let mut seg = seg.clone();
    let mut schedule = PruneSchedule::new(strat, mode.as_str(), prompt.len(), n_visual, n_layers);
    let mut state = LoopState {
        keep_by_pos: vec![vec![1.0; prompt.len()]; n_layers],
        mode,
    };
    let dlayer = decision_layer(strat, cfg, n_layers);
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut alive_visual = n_visual;

    for step in 1..=cfg.max_new_tokens {
        let token = sample_token(&last_logits, cfg, step);
        tokens.push(token);
        seg.push_response();
        for l in 0..n_layers {
            state.keep_by_pos[l].push(1.0);
        }

        let mut session = DecodeSession::start(params, token, &seg)?;
        let mut per_layer_keys = Vec::with_capacity(n_layers);
        let mut decision: Option<StepDecision> = None;
        for l in 0..n_layers {
            let mask = state.layer_mask(&cache, l);
            let attn = session.advance_layer(&mut cache, &mask)?;
            per_layer_keys.push(mask.iter().filter(|&&m| m > 0.0).count());
            if dlayer == Some(l) {
                if let Some(d) = decide(
                    strat,
                    step,
                    attn,
                    &mask,
                    &seg,
                    cfg,
                    predictor,
                    n_layers,
                    n_visual,
                )? {
                    state.apply_drops(&mut cache, &d.drops)?;
                    decision = Some(d);
                }
            }
        }
        let out = session.finish()?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(step, &out.attention, &out.logits, &seg);
        }

        let (rate, pi, dropped) = match &decision {
            Some(d) => (
                d.rate,
                d.pi.clone(),
                d.drops.first().map(|(_, p)| p.len()).unwrap_or(0),
            ),
            None => (0.0, None, 0),
        };
        let before = alive_visual;
        alive_visual -= dropped;
        schedule.steps.push(StepRecord {
            step,
            token_id: token,
            rate,
            pi,
            visual_alive_before: before,
            visual_alive_after: alive_visual,
            dropped,
            per_layer_keys,
        });
        last_logits = out.logits;
    }

    let cost_cfg = costing::CostConfig::for_model(&params.config, &seg);
    let report = costing::schedule_flops(&schedule, &cost_cfg)?;
    schedule.total_flops = report.total_flops;
    schedule.baseline_flops = report.baseline_flops;
    Ok((tokens, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, prefill, ModelConfig};

    fn test_params() -> Params {
        init_model(&ModelConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: 64,
            max_seq: 128,
            seed: 21,
        })
        .unwrap()
    }

    fn prompt_and_seg(seed: u64) -> (Vec<usize>, TokenSegmentation) {
        let mut rng = SplitMix64::new(seed);
        let seg = TokenSegmentation::prompt(2, 6, 2).unwrap();
        let prompt: Vec<usize> = (0..seg.seq_len()).map(|_| rng.below(64)).collect();
        (prompt, seg)
    }

    fn cfg(max_new: usize, prune_layer: usize) -> DecodeConfig {
        DecodeConfig { max_new_tokens: max_new, prune_layer, ..Default::default() }
    }

    #[test]
    fn none_strategy_records_full_schedule() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(1);
        let (tokens, schedule) = generate(
            &params,
            None,
            &prompt,
            &seg,
            &cfg(6, 1),
            &PruneStrategy::None,
            PruneMode::InferHard,
        )
        .unwrap();
        assert_eq!(tokens.len(), 6);
        assert_eq!(schedule.steps.len(), 6);
        assert!(schedule.steps.iter().all(|s| s.rate == 0.0 && s.dropped == 0));
        assert_eq!(schedule.total_flops, schedule.baseline_flops);
        schedule.check_accounting().unwrap();
    }

    #[test]
    fn forced_keep_all_predictor_matches_baseline_tokens() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(2);
        let c = cfg(8, 1);
        let baseline = generate(
            &params,
            None,
            &prompt,
            &seg,
            &c,
            &PruneStrategy::None,
            PruneMode::InferHard,
        )
        .unwrap();
        let keep_all = PredictorParams::forced_keep_all(c.rate_classes, 2).unwrap();
        let dyrate = generate(
            &params,
            Some(&keep_all),
            &prompt,
            &seg,
            &c,
            &PruneStrategy::DyRate,
            PruneMode::InferHard,
        )
        .unwrap();
        assert_eq!(baseline.0, dyrate.0);
        assert!(dyrate.1.steps.iter().all(|s| s.rate == 0.0));
    }

    #[test]
    fn fastv_duality_soft_vs_hard() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(3);
        let c = cfg(8, 1);
        let strat = PruneStrategy::FastV { k_layer: 1, rate: 0.5 };
        let hard =
            generate(&params, None, &prompt, &seg, &c, &strat, PruneMode::InferHard).unwrap();
        let soft =
            generate(&params, None, &prompt, &seg, &c, &strat, PruneMode::TrainSoft).unwrap();
        assert_eq!(hard.0, soft.0, "soft and hard runs disagree on tokens");
        // Same effective key counts step by step.
        for (h, s) in hard.1.steps.iter().zip(soft.1.steps.iter()) {
            assert_eq!(h.per_layer_keys, s.per_layer_keys);
        }
        hard.1.check_accounting().unwrap();
        soft.1.check_accounting().unwrap();
    }

    #[test]
    fn aliveness_is_monotone_under_dyrate() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(4);
        let c = cfg(10, 1);
        // Mild logits toward higher rates so drops actually happen.
        let mut predictor = PredictorParams::keep_all_init(c.rate_classes, 2).unwrap();
        predictor.bias = vec![0.0, 0.3, 0.3, 0.6];
        let (_, schedule) = generate(
            &params,
            Some(&predictor),
            &prompt,
            &seg,
            &c,
            &PruneStrategy::DyRate,
            PruneMode::InferHard,
        )
        .unwrap();
        schedule.check_accounting().unwrap();
        let mut prev = schedule.n_visual;
        let mut any_drop = false;
        for s in &schedule.steps {
            assert!(s.visual_alive_after <= prev);
            any_drop |= s.dropped > 0;
            prev = s.visual_alive_after;
        }
        assert!(any_drop, "expected at least one drop in this configuration");
    }

    #[test]
    fn zero_rate_strategies_match_baseline() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(9);
        let c = cfg(6, 1);
        let base = generate(&params, None, &prompt, &seg, &c, &PruneStrategy::None, PruneMode::InferHard)
            .unwrap();
        for strat in [
            PruneStrategy::FastV { k_layer: 1, rate: 0.0 },
            PruneStrategy::Fp { rate: 0.0, k_layer: 1 },
            PruneStrategy::Dp { p_prune_4th: 0.0, r_prime: 0.0 },
        ] {
            let run = generate(&params, None, &prompt, &seg, &c, &strat, PruneMode::InferHard)
                .unwrap();
            assert_eq!(base.0, run.0, "{} diverged from baseline", strat.name());
            assert_eq!(run.1.total_flops, run.1.baseline_flops);
        }
    }

    #[test]
    fn vtw_drops_all_visual_once() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(5);
        let (_, schedule) = generate(
            &params,
            None,
            &prompt,
            &seg,
            &cfg(4, 1),
            &PruneStrategy::Vtw { k_layer: 2 },
            PruneMode::InferHard,
        )
        .unwrap();
        assert_eq!(schedule.steps[0].dropped, 6);
        assert_eq!(schedule.steps[0].rate, 1.0);
        assert!(schedule.steps[1..].iter().all(|s| s.dropped == 0));
        // Layers below K keep the full prompt; pruned layers lost 6 keys.
        let s1 = &schedule.steps[1];
        assert_eq!(s1.per_layer_keys[0], schedule.prompt_len + 2);
        assert_eq!(s1.per_layer_keys[2], schedule.prompt_len + 2 - 6);
    }

    #[test]
    fn predictor_strategy_pairing_enforced() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(6);
        let c = cfg(2, 1);
        assert!(generate(
            &params,
            None,
            &prompt,
            &seg,
            &c,
            &PruneStrategy::DyRate,
            PruneMode::InferHard
        )
        .is_err());
        let p = PredictorParams::keep_all_init(4, 2).unwrap();
        assert!(generate(
            &params,
            Some(&p),
            &prompt,
            &seg,
            &c,
            &PruneStrategy::None,
            PruneMode::InferHard
        )
        .is_err());
    }

    #[test]
    fn hard_prune_step_examples() {
        let params = test_params();
        let (prompt, _seg) = prompt_and_seg(7);
        let mut cache = KVCache::new(&params.config);
        prefill(&params, &prompt, &mut cache).unwrap();
        let n = cache.layers[0].len();

        // All-ones keep-vector leaves the cache unchanged.
        let before: Vec<usize> = cache.layers.iter().map(|l| l.len()).collect();
        hard_prune_step(&mut cache, &vec![1.0; n], 1).unwrap();
        let after: Vec<usize> = cache.layers.iter().map(|l| l.len()).collect();
        assert_eq!(before, after);

        // Dropping 3 of n from layer 1 onward leaves earlier layers intact.
        let mut keep = vec![1.0; n];
        keep[1] = 0.0;
        keep[4] = 0.0;
        keep[5] = 0.0;
        hard_prune_step(&mut cache, &keep, 1).unwrap();
        assert_eq!(cache.layers[0].len(), n);
        for l in 1..cache.layers.len() {
            assert_eq!(cache.layers[l].len(), n - 3);
            assert!(cache.layers[l].positions.windows(2).all(|w| w[0] < w[1]));
            assert!(cache.layers[l].alive.iter().all(|&a| a));
        }
    }

    #[test]
    fn top_p_with_dyrate_keeps_duality() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(12);
        let mut predictor = PredictorParams::keep_all_init(4, 2).unwrap();
        predictor.bias = vec![0.0, 0.3, 0.5, 0.7];
        let c = DecodeConfig {
            strategy: DecodeStrategy::TopP { p: 0.95, seed: 5 },
            ..cfg(8, 1)
        };
        let hard = generate(
            &params,
            Some(&predictor),
            &prompt,
            &seg,
            &c,
            &PruneStrategy::DyRate,
            PruneMode::InferHard,
        )
        .unwrap();
        let soft = generate(
            &params,
            Some(&predictor),
            &prompt,
            &seg,
            &c,
            &PruneStrategy::DyRate,
            PruneMode::TrainSoft,
        )
        .unwrap();
        assert_eq!(hard.0, soft.0);
        hard.1.check_accounting().unwrap();
    }

    #[test]
    fn top_p_generation_is_seeded() {
        let params = test_params();
        let (prompt, seg) = prompt_and_seg(8);
        let c = DecodeConfig {
            strategy: DecodeStrategy::TopP { p: 0.9, seed: 33 },
            ..cfg(6, 1)
        };
        let a = generate(&params, None, &prompt, &seg, &c, &PruneStrategy::None, PruneMode::InferHard)
            .unwrap();
        let b = generate(&params, None, &prompt, &seg, &c, &PruneStrategy::None, PruneMode::InferHard)
            .unwrap();
        assert_eq!(a.0, b.0);
    }
}
