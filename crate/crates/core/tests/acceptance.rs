//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Training-dependent criteria share one pretrained
//! model and one trained predictor via OnceLock.

use std::sync::{Mutex, OnceLock};

use dyrate_core::costing::{
    analytic_dyrate_schedule, analytic_strategy_schedule, latency_proxy, schedule_flops,
    CostConfig,
};
use dyrate_core::engine::{
    generate, generate_observed, DecodeConfig, PruneMode, PruneStrategy, StepObserver,
};
use dyrate_core::harness::{
    eval_strategy, heldout_accuracy, total_loss, train_predictor, train_toy_model, Optimizer,
    TrainConfig,
};
use dyrate_core::model::{
    init_model, AttentionMaps, ModelConfig, Params, TokenSegmentation,
};
use dyrate_core::numerics::{grad_check, GradTape, SplitMix64, Tensor};
use dyrate_core::pruner::{
    build_candidate_masks, gumbel_noise, gumbel_softmax, gumbel_softmax_tape,
    predict_rate_distribution_tape, GumbelConfig, PredictorParams, RateDistribution, RateSet,
};
use dyrate_core::workload::{
    read_trace, write_trace, AttentionTrace, SyntheticTask, TraceRecord,
};

/// The two training-backed criteria run one at a time: the 10-minute
/// budget is specified for a single core, so they must not contend with
/// each other for the same cores.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Criterion verdict lines must survive libtest's output capture, so they
/// go straight to the real stdout.
fn report(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

// ── shared trained artifacts ─────────────────────────────────────────

fn accept_model_config() -> ModelConfig {
    ModelConfig { max_seq: 128, seed: 0, ..Default::default() }
}

/// The λ=0.5 decaying-redundancy task the trained criteria run on.
fn accept_task() -> SyntheticTask {
    SyntheticTask {
        seed: 0,
        n_sys: 2,
        n_img: 16,
        n_ins: 2,
        response_len: 12,
        lambda: 0.5,
        salient_fraction: 1.0,
    }
}

const ACCEPT_PRUNE_LAYER: usize = 1;
const ACCEPT_RATE_CLASSES: usize = 4;

fn trained_model() -> &'static (Params, f64) {
    static MODEL: OnceLock<(Params, f64)> = OnceLock::new();
    MODEL.get_or_init(|| {
        // Plain SGD here: its solution routes the second hop through the
        // pruned layers with rankable attention, which the trend criterion
        // needs; see the predictor recipe below.
        let cfg = TrainConfig { lr: 0.1, steps: 1800, batch: 16, ..Default::default() };
        let (params, _) = train_toy_model(&accept_model_config(), &accept_task(), &cfg)
            .expect("pretraining failed");
        let acc = heldout_accuracy(&params, &accept_task(), 32).expect("eval failed");
        (params, acc)
    })
}

fn trained_predictor() -> &'static PredictorParams {
    static PRED: OnceLock<PredictorParams> = OnceLock::new();
    PRED.get_or_init(|| {
        let (params, _) = trained_model();
        let cfg = TrainConfig {
            lr: 0.05,
            steps: 300,
            batch: 8,
            budget_target: 0.5,
            budget_weight: 4.0,
            optimizer: Optimizer::Adam,
            seed: 0,
            ..Default::default()
        };
        let (predictor, _) =
            train_predictor(params, &accept_task(), &cfg, ACCEPT_PRUNE_LAYER, ACCEPT_RATE_CLASSES)
                .expect("predictor training failed");
        predictor
    })
}

fn accept_decode_config(gumbel_seed: u64) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: accept_task().response_len,
        prune_layer: ACCEPT_PRUNE_LAYER,
        rate_classes: ACCEPT_RATE_CLASSES,
        gumbel: GumbelConfig { seed: gumbel_seed, ..Default::default() },
        ..Default::default()
    }
}

// ── 1. FLOPs table reproduction ──────────────────────────────────────

#[test]
fn criterion_flops_table_reproduction() {
    let t0 = std::time::Instant::now();
    let cfg = CostConfig::llava_7b();
    let cases = [
        (PruneStrategy::FastV { k_layer: 3, rate: 0.5 }, 57.9),
        (PruneStrategy::FastV { k_layer: 2, rate: 0.5 }, 55.4),
        (PruneStrategy::Vtw { k_layer: 16 }, 55.2),
    ];
    let mut measured = Vec::new();
    for (strat, expected) in &cases {
        let schedule = analytic_strategy_schedule(&cfg, strat).unwrap();
        let report = schedule_flops(&schedule, &cfg).unwrap();
        assert!(
            (report.ratio_pct - expected).abs() <= 5.0,
            "{} {}: ratio {:.2}% vs published {expected}% (tolerance ±5)",
            strat.name(),
            strat.params_string(),
            report.ratio_pct
        );
        measured.push(format!(
            "{}({})={:.2}% (published {expected}%)",
            strat.name(),
            strat.params_string(),
            report.ratio_pct
        ));
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "cost model too slow: {elapsed:?}");
    report(format!(
        "PASS FLOPs table reproduction: {} in {:.3}s",
        measured.join(", "),
        elapsed.as_secs_f64()
    ));
}

// ── 2. Gumbel expectation property ───────────────────────────────────

fn tv_distance(pi: &[f64], counts: &[usize], n: usize) -> f64 {
    0.5 * pi
        .iter()
        .zip(counts.iter())
        .map(|(p, &c)| (p - c as f64 / n as f64).abs())
        .sum::<f64>()
}

#[test]
fn criterion_gumbel_expectation() {
    let t0 = std::time::Instant::now();
    let draws = 100_000;

    let pi = RateDistribution::new(vec![0.3, 0.7]).unwrap();
    let mut counts = vec![0usize; 2];
    for seed in 0..draws {
        let s = gumbel_softmax(&pi, &GumbelConfig { seed: seed as u64, ..Default::default() })
            .unwrap();
        counts[s.class] += 1;
    }
    let tv2 = tv_distance(pi.probs(), &counts, draws);
    assert!(tv2 < 0.01, "TV distance {tv2} for (0.3, 0.7)");

    let mut worst = tv2;
    for seed in 0..5u64 {
        let mut rng = SplitMix64::new(seed);
        let raw: Vec<f64> = (0..4).map(|_| rng.uniform(0.05, 1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let pi = RateDistribution::new(raw.iter().map(|v| v / sum).collect()).unwrap();
        let mut counts = vec![0usize; 4];
        for draw in 0..draws {
            let s = gumbel_softmax(
                &pi,
                &GumbelConfig { seed: seed * 1_000_000 + draw as u64, ..Default::default() },
            )
            .unwrap();
            counts[s.class] += 1;
        }
        let tv = tv_distance(pi.probs(), &counts, draws);
        assert!(tv < 0.01, "TV distance {tv} for random pi seed {seed}");
        worst = worst.max(tv);
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "sampling too slow: {elapsed:?}");
    report(format!(
        "PASS Gumbel expectation: worst TV distance {:.4} over 100k draws x 6 distributions in {:.2}s",
        worst,
        elapsed.as_secs_f64()
    ));
}

// ── 3. End-to-end differentiability ──────────────────────────────────

/// The full chain from attention shares to total_loss, with soft Gumbel:
/// segment_shares → predict → gumbel(soft) → mix_masks → (loss on mask) +
/// budget. Checked by central differences over every predictor weight.
#[test]
fn criterion_end_to_end_differentiability() {
    let k = 4;
    let n_heads = 4;
    let n_feat = n_heads * 4;
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = SplitMix64::new(100 + seed);

        // Random normalized attention rows for each head over 10 keys.
        let mut seg = TokenSegmentation::prompt(2, 4, 2).unwrap();
        seg.push_response();
        seg.push_response();
        let n_keys = seg.seq_len();
        let mut head_rows = Vec::new();
        for _ in 0..n_heads {
            let mut row: Vec<f64> = (0..n_keys).map(|_| rng.uniform(0.05, 1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            head_rows.push(row);
        }
        // Importance and candidate masks are data-dependent constants.
        let positions: Vec<usize> = (0..n_keys).collect();
        let mean: Vec<f64> = (0..n_keys)
            .map(|j| head_rows.iter().map(|r| r[j]).sum::<f64>() / n_heads as f64)
            .collect();
        let importance: Vec<(usize, f64)> =
            seg.visual_range().map(|p| (p, mean[p])).collect();
        let cms = build_candidate_masks(&importance, &seg, &positions, k).unwrap();
        let cms_matrix = cms.as_matrix();

        // One set of indicators per segment kind.
        let mut indicators = vec![vec![0.0; n_keys]; 4];
        for (p, ind_row) in positions.iter().zip(0..) {
            let _ = ind_row;
            let kind = seg.kind_at(*p).unwrap();
            indicators[kind.index()][*p] = 1.0;
        }

        let mut noise_rng = SplitMix64::new(900 + seed);
        let noise = gumbel_noise(k, &mut noise_rng);
        let bias_vals: Vec<f64> = (0..k).map(|_| rng.uniform(-0.3, 0.3)).collect();
        let loss_w: Vec<f64> = (0..n_keys).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target_vocab = 6usize;
        let loss_proj: Vec<f64> =
            (0..n_keys * target_vocab).map(|_| rng.uniform(-0.8, 0.8)).collect();

        let w0: Vec<f64> = (0..k * n_feat).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let x = Tensor::new(vec![k, n_feat], w0).unwrap();
        let head_rows = head_rows.clone();
        let indicators = indicators.clone();
        let train_cfg = TrainConfig { budget_target: 0.4, budget_weight: 1.5, ..Default::default() };
        let rates = RateSet::new(k).unwrap();

        let err = grad_check(
            |tape, weights| {
                // segment_shares on the tape.
                let ind_vars: Vec<_> =
                    indicators.iter().map(|i| tape.constant(i, &[n_keys])).collect();
                let mut shares = Vec::new();
                for row in &head_rows {
                    let row_var = tape.constant(row, &[n_keys]);
                    for &ind in &ind_vars {
                        shares.push(tape.dot(row_var, ind)?);
                    }
                }
                let features = tape.concat_rows(&shares, 1)?;
                let bias = tape.constant(&bias_vals, &[k]);
                let pi = predict_rate_distribution_tape(tape, features, weights, bias, k)?;
                let y = gumbel_softmax_tape(
                    tape,
                    pi,
                    &noise,
                    &GumbelConfig { temperature: 1.0, hard: false, seed: 0 },
                )?;
                let masks = tape.constant(&cms_matrix, &[k, n_keys]);
                let m = tape.matmul(y, masks, 1, k, n_keys)?;
                // Task logits derived from the mixed mask.
                let gate = tape.constant(&loss_w, &[n_keys]);
                let gated = tape.mul(m, gate)?;
                let proj = tape.constant(&loss_proj, &[n_keys, target_vocab]);
                let logits = tape.matmul(gated, proj, 1, n_keys, target_vocab)?;
                total_loss(tape, &[logits], &[2], &[pi], &rates, &train_cfg)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: max rel error {err}");
        worst = worst.max(err);
    }
    report(format!("PASS end-to-end differentiability: max rel error {worst:.3e} over 3 seeds"));
}

// ── 4. Straight-through consistency ──────────────────────────────────

#[test]
fn criterion_straight_through_consistency() {
    let k = 4;
    let n_heads = 4;
    let n_feat = n_heads * 4;
    for seed in 0..5u64 {
        let mut rng = SplitMix64::new(40 + seed);
        let features: Vec<f64> = (0..n_feat).map(|_| rng.uniform(0.0, 0.5)).collect();
        let w0: Vec<f64> = (0..k * n_feat).map(|_| rng.uniform(-0.6, 0.6)).collect();
        let b0: Vec<f64> = (0..k).map(|_| rng.uniform(-0.2, 0.2)).collect();
        // Real nested candidate masks over a 9-key domain with 6 visual keys.
        let seg = TokenSegmentation::prompt(2, 6, 1).unwrap();
        let n_keys = seg.seq_len();
        let positions: Vec<usize> = (0..n_keys).collect();
        let importance: Vec<(usize, f64)> =
            seg.visual_range().map(|p| (p, rng.next_f64())).collect();
        let cms = build_candidate_masks(&importance, &seg, &positions, k).unwrap();
        let mask_matrix = cms.as_matrix();
        let c: Vec<f64> = (0..n_keys).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut noise_rng = SplitMix64::new(7000 + seed);
        let noise = gumbel_noise(k, &mut noise_rng);

        let grads_for = |hard: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = GradTape::new();
            let w = tape.param(&w0, &[k, n_feat]);
            let b = tape.param(&b0, &[k]);
            let f = tape.constant(&features, &[n_feat]);
            let pi = predict_rate_distribution_tape(&mut tape, f, w, b, k).unwrap();
            let y = gumbel_softmax_tape(
                &mut tape,
                pi,
                &noise,
                &GumbelConfig { temperature: 0.8, hard, seed: 0 },
            )
            .unwrap();
            let masks = tape.constant(&mask_matrix, &[k, n_keys]);
            let m = tape.matmul(y, masks, 1, k, n_keys).unwrap();
            let cost = tape.constant(&c, &[n_keys]);
            let loss = tape.dot(m, cost).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad_or_zeros(w), tape.grad_or_zeros(b))
        };

        let (hw, hb) = grads_for(true);
        let (sw, sb) = grads_for(false);
        assert!(hw.iter().any(|g| *g != 0.0), "degenerate gradient");
        assert_eq!(hw, sw, "weight gradients differ at seed {seed}");
        assert_eq!(hb, sb, "bias gradients differ at seed {seed}");
    }
    report(format!("PASS straight-through consistency: hard and soft gradients bitwise identical on 5 seeds"));
}

// ── 5. Mask/drop duality ─────────────────────────────────────────────

struct LogitsCollector {
    logits: Vec<Vec<f64>>,
}

impl StepObserver for LogitsCollector {
    fn on_step(
        &mut self,
        _step: usize,
        _attention: &AttentionMaps,
        logits: &[f64],
        _seg: &TokenSegmentation,
    ) {
        self.logits.push(logits.to_vec());
    }
}

#[test]
fn criterion_mask_drop_duality() {
    let mut total_drops = 0usize;
    let mut worst_logit_gap: f64 = 0.0;
    for run in 0..20u64 {
        let params = init_model(&ModelConfig {
            max_seq: 128,
            seed: 500 + run,
            ..Default::default()
        })
        .unwrap();
        let mut rng = SplitMix64::new(run);
        let seg = TokenSegmentation::prompt(2, 10, 2).unwrap();
        let prompt: Vec<usize> =
            (0..seg.seq_len()).map(|_| rng.below(params.config.vocab_size)).collect();

        // A predictor with random weights and a rate-leaning bias, so drops
        // really happen.
        let mut predictor = PredictorParams::keep_all_init(4, params.config.n_heads).unwrap();
        predictor.bias = vec![0.0, 0.4, 0.6, 0.8];
        for w in predictor.weight.iter_mut() {
            *w = rng.uniform(-0.5, 0.5);
        }
        let cfg = DecodeConfig {
            max_new_tokens: 16,
            prune_layer: 1,
            rate_classes: 4,
            gumbel: GumbelConfig { seed: run, ..Default::default() },
            ..Default::default()
        };

        let run_mode = |mode: PruneMode| {
            let mut collector = LogitsCollector { logits: Vec::new() };
            let (tokens, schedule) = generate_observed(
                &params,
                Some(&predictor),
                &prompt,
                &seg,
                &cfg,
                &PruneStrategy::DyRate,
                mode,
                Some(&mut collector as &mut dyn StepObserver),
            )
            .unwrap();
            (tokens, schedule, collector.logits)
        };
        let (hard_tokens, hard_sched, hard_logits) = run_mode(PruneMode::InferHard);
        let (soft_tokens, soft_sched, soft_logits) = run_mode(PruneMode::TrainSoft);

        assert_eq!(hard_tokens, soft_tokens, "run {run}: token ids diverge");
        for (s_h, s_s) in hard_sched.steps.iter().zip(soft_sched.steps.iter()) {
            assert_eq!(s_h.rate, s_s.rate, "run {run} step {}: rates differ", s_h.step);
            assert_eq!(s_h.per_layer_keys, s_s.per_layer_keys);
        }
        for (t, (h, s)) in hard_logits.iter().zip(soft_logits.iter()).enumerate() {
            for (a, b) in h.iter().zip(s.iter()) {
                let gap = (a - b).abs();
                worst_logit_gap = worst_logit_gap.max(gap);
                assert!(gap < 1e-9, "run {run} step {t}: logit gap {gap}");
            }
        }
        total_drops += hard_sched.n_visual
            - hard_sched.steps.last().unwrap().visual_alive_after;
    }
    assert!(total_drops > 0, "duality check never exercised an actual drop");
    report(format!(
        "PASS mask/drop duality: 20 runs x 16 steps, {} tokens dropped total, worst logit gap {:.2e}",
        total_drops, worst_logit_gap
    ));
}

// ── 6. r_1 identity ──────────────────────────────────────────────────

#[test]
fn criterion_r1_identity() {
    let params = init_model(&ModelConfig { max_seq: 128, seed: 9, ..Default::default() }).unwrap();
    let keep_all = PredictorParams::forced_keep_all(4, params.config.n_heads).unwrap();
    for run in 0..10u64 {
        let mut rng = SplitMix64::new(3000 + run);
        let seg = TokenSegmentation::prompt(1, 8, 3).unwrap();
        let prompt: Vec<usize> =
            (0..seg.seq_len()).map(|_| rng.below(params.config.vocab_size)).collect();
        let cfg = DecodeConfig {
            max_new_tokens: 12,
            prune_layer: 1,
            rate_classes: 4,
            gumbel: GumbelConfig { seed: run, ..Default::default() },
            ..Default::default()
        };
        let (baseline, _) = generate(
            &params,
            None,
            &prompt,
            &seg,
            &cfg,
            &PruneStrategy::None,
            PruneMode::InferHard,
        )
        .unwrap();
        let (pinned, schedule) = generate(
            &params,
            Some(&keep_all),
            &prompt,
            &seg,
            &cfg,
            &PruneStrategy::DyRate,
            PruneMode::InferHard,
        )
        .unwrap();
        assert_eq!(baseline, pinned, "prompt {run}: token ids diverge under pinned r_1");
        assert!(schedule.steps.iter().all(|s| s.rate == 0.0 && s.dropped == 0));
    }
    report(format!("PASS r_1 identity: pinned keep-all predictor reproduces baseline ids on 10 prompts"));
}

// ── 7. Candidate-mask combinatorics ──────────────────────────────────

#[test]
fn criterion_candidate_mask_combinatorics() {
    let mut cases = 0usize;
    for n in 1..=64usize {
        // 2 non-visual tokens on each side of the visual span.
        let seg = TokenSegmentation::prompt(2, n, 2).unwrap();
        let positions: Vec<usize> = (0..seg.seq_len()).collect();
        let mut rng = SplitMix64::new(n as u64);
        let importance: Vec<(usize, f64)> =
            seg.visual_range().map(|p| (p, rng.next_f64())).collect();
        for k in 2..=8usize {
            let cms = build_candidate_masks(&importance, &seg, &positions, k).unwrap();
            let mut prev_keep: Option<Vec<usize>> = None;
            for idx in 0..k {
                let expect_drop = idx * n / k;
                assert_eq!(
                    cms.drop_counts()[idx],
                    expect_drop,
                    "N={n} K={k} k_index={idx}"
                );
                let mask = cms.mask(idx);
                let dropped = mask.iter().filter(|&&m| m == 0.0).count();
                assert_eq!(dropped, expect_drop, "N={n} K={k} k_index={idx}: realized drops");
                // Non-visual positions never dropped.
                for (&pos, &m) in positions.iter().zip(mask.iter()) {
                    if !seg.visual_range().contains(&pos) {
                        assert_eq!(m, 1.0, "N={n} K={k}: non-visual position {pos} dropped");
                    }
                }
                let keep: Vec<usize> = positions
                    .iter()
                    .zip(mask.iter())
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(&p, _)| p)
                    .collect();
                if let Some(prev) = &prev_keep {
                    assert!(
                        keep.iter().all(|p| prev.contains(p)),
                        "N={n} K={k} k_index={idx}: keep-set not nested"
                    );
                }
                prev_keep = Some(keep);
            }
            cases += 1;
        }
    }
    report(format!("PASS candidate-mask combinatorics: {cases} (N, K) cells checked exhaustively"));
}

// ── 8. Qualitative redundancy-decay reproduction ─────────────────────

#[test]
fn criterion_rate_grows_over_generation() {
    let _serial = heavy_guard();
    let t0 = std::time::Instant::now();
    let (params, acc) = trained_model();
    assert!(
        *acc >= 0.90,
        "pretrained model accuracy {acc} below 0.90; later criteria would be meaningless"
    );
    let predictor = trained_predictor();
    let summary = eval_strategy(
        params,
        Some(predictor),
        &accept_task(),
        &PruneStrategy::DyRate,
        &accept_decode_config(0),
        48,
    )
    .unwrap();
    let rates = &summary.per_step_mean_rates;
    let q = rates.len() / 4;
    let first: f64 = rates[..q].iter().sum::<f64>() / q as f64;
    let last: f64 = rates[rates.len() - q..].iter().sum::<f64>() / q as f64;
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "training + evaluation took {elapsed:.0}s, budget is 10 min");
    assert!(
        last > first,
        "late-step mean rate {last:.3} not above early-step mean rate {first:.3}; \
         full trajectory {rates:?}"
    );
    report(format!(
        "PASS rate growth: first-quartile mean rate {first:.3} < last-quartile {last:.3} \
         (model acc {acc:.3}, {elapsed:.0}s incl. shared training)"
    ));
}

// ── 9. Efficiency-vs-accuracy ordering ───────────────────────────────

#[test]
fn criterion_efficiency_accuracy_ordering() {
    let _serial = heavy_guard();
    let (params, _) = trained_model();
    let predictor = trained_predictor();
    let task = accept_task();
    let decode = accept_decode_config(0);
    let dyrate = eval_strategy(
        params,
        Some(predictor),
        &task,
        &PruneStrategy::DyRate,
        &decode,
        48,
    )
    .unwrap();

    // FastV at the grid rate whose FLOPs ratio lands closest to DyRate's.
    let mut fastv_best: Option<(f64, dyrate_core::harness::EvalSummary)> = None;
    for step in 1..=19 {
        let r = step as f64 * 0.05;
        let s = eval_strategy(
            params,
            None,
            &task,
            &PruneStrategy::FastV { k_layer: ACCEPT_PRUNE_LAYER, rate: r },
            &decode,
            48,
        )
        .unwrap();
        let gap = (s.flops_ratio_pct - dyrate.flops_ratio_pct).abs();
        if fastv_best.as_ref().map_or(true, |(g, _)| gap < *g) {
            fastv_best = Some((gap, s));
        }
    }
    let (fastv_gap, fastv) = fastv_best.unwrap();
    assert!(fastv_gap <= 3.0, "no FastV rate within 3 FLOPs points (closest {fastv_gap:.2})");

    // VTW at the layer whose ratio lands closest.
    let mut vtw_best: Option<(f64, dyrate_core::harness::EvalSummary)> = None;
    for k in 1..params.config.n_layers {
        let s = eval_strategy(params, None, &task, &PruneStrategy::Vtw { k_layer: k }, &decode, 48)
            .unwrap();
        let gap = (s.flops_ratio_pct - dyrate.flops_ratio_pct).abs();
        if vtw_best.as_ref().map_or(true, |(g, _)| gap < *g) {
            vtw_best = Some((gap, s));
        }
    }
    let (vtw_gap, vtw) = vtw_best.unwrap();
    assert!(vtw_gap <= 3.0, "no VTW layer within 3 FLOPs points (closest {vtw_gap:.2})");

    assert!(
        dyrate.accuracy >= fastv.accuracy - 0.02,
        "dyrate acc {:.3} (flops {:.1}%) below fastv acc {:.3} (flops {:.1}%) - 2 points",
        dyrate.accuracy,
        dyrate.flops_ratio_pct,
        fastv.accuracy,
        fastv.flops_ratio_pct
    );
    assert!(
        dyrate.accuracy >= vtw.accuracy - 0.02,
        "dyrate acc {:.3} below vtw acc {:.3} - 2 points",
        dyrate.accuracy,
        vtw.accuracy
    );
    report(format!(
        "PASS efficiency ordering: dyrate acc {:.3} @ {:.1}% flops >= fastv {:.3} @ {:.1}% - 2pts \
         and >= vtw {:.3} @ {:.1}% - 2pts",
        dyrate.accuracy,
        dyrate.flops_ratio_pct,
        fastv.accuracy,
        fastv.flops_ratio_pct,
        vtw.accuracy,
        vtw.flops_ratio_pct
    ));
}

// ── 10. Trace format round trip ──────────────────────────────────────

fn random_trace(seed: u64) -> AttentionTrace {
    let mut rng = SplitMix64::new(seed);
    let n_heads = 1 + rng.below(4);
    let n_layers = 1 + rng.below(4);
    // Every 7th trace has an empty response (zero steps).
    let n_steps = if seed % 7 == 0 { 0 } else { 1 + rng.below(5) };
    let n_sys = rng.below(3);
    let n_img = 1 + rng.below(6);
    let n_ins = rng.below(3);
    let mut seg = TokenSegmentation::prompt(n_sys, n_img, n_ins).unwrap();
    for _ in 0..n_steps {
        seg.push_response();
    }
    let mut records = Vec::new();
    for step in 1..=n_steps {
        for layer in 0..n_layers {
            let max_keys = n_sys + n_img + n_ins + step;
            // Random alive subset, always keeping the current position.
            let mut positions: Vec<u32> = (0..max_keys as u32 - 1)
                .filter(|_| rng.next_f64() > 0.3)
                .collect();
            positions.push(max_keys as u32 - 1);
            let n_keys = positions.len();
            let mut rows = Vec::with_capacity(n_heads * n_keys);
            for _ in 0..n_heads {
                let mut row: Vec<f32> =
                    (0..n_keys).map(|_| rng.uniform(0.01, 1.0) as f32).collect();
                let sum: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                rows.extend_from_slice(&row);
            }
            records.push(TraceRecord { step, layer, positions, rows });
        }
    }
    AttentionTrace { n_heads, n_layers, n_steps, segmentation: seg, records }
}

#[test]
fn criterion_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut empty_seen = 0;
    let mut single_head_seen = 0;
    for seed in 0..100u64 {
        let trace = random_trace(seed);
        if trace.n_steps == 0 {
            empty_seen += 1;
        }
        if trace.n_heads == 1 {
            single_head_seen += 1;
        }
        let path = dir.path().join(format!("t{seed}.dytr"));
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(trace, back, "trace {seed} not bit-exact");
        // Byte-level: re-encoding the decoded trace is identical.
        let path2 = dir.path().join(format!("t{seed}b.dytr"));
        write_trace(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "trace {seed} bytes differ after re-encode"
        );
    }
    assert!(empty_seen > 0 && single_head_seen > 0, "edge cases not covered");
    report(format!(
        "PASS trace round trip: 100 traces bit-exact ({empty_seen} empty-response, {single_head_seen} single-head)"
    ));
}

// ── latency proxy sanity (Table-3 DyRate row) ────────────────────────

#[test]
fn criterion_latency_proxy_dyrate_row() {
    let cfg = CostConfig::llava_7b();
    let base = analytic_strategy_schedule(&cfg, &PruneStrategy::None).unwrap();
    let base_report = schedule_flops(&base, &cfg).unwrap();
    let dy = analytic_dyrate_schedule(&cfg, 0.75).unwrap();
    let dy_report = schedule_flops(&dy, &cfg).unwrap();
    let budget = 1e12;
    let ratio = 100.0 * latency_proxy(&dy_report, budget).unwrap()
        / latency_proxy(&base_report, budget).unwrap();
    assert!(
        (ratio - 33.33).abs() <= 10.0,
        "dyrate proxy ratio {ratio:.2}% vs published 33.33% (tolerance ±10)"
    );
    // Monotone: ordering of proxies matches ordering of FLOPs.
    let fastv = analytic_strategy_schedule(
        &cfg,
        &PruneStrategy::FastV { k_layer: 3, rate: 0.5 },
    )
    .unwrap();
    let fastv_report = schedule_flops(&fastv, &cfg).unwrap();
    let proxies = [
        latency_proxy(&dy_report, budget).unwrap(),
        latency_proxy(&fastv_report, budget).unwrap(),
        latency_proxy(&base_report, budget).unwrap(),
    ];
    let flops = [dy_report.total_flops, fastv_report.total_flops, base_report.total_flops];
    assert!(proxies.windows(2).all(|w| w[0] < w[1]));
    assert!(flops.windows(2).all(|w| w[0] < w[1]));
    report(format!("PASS latency proxy: dyrate at mean rate 0.75 = {ratio:.2}% of baseline (published 33.33%, ±10)"));
}
