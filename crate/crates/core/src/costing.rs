//! Analytical decoder FLOPs model.
//!
//! Per layer over n tokens: 4nd² + 2n²d + 2ndm (attention projections,
//! attention matrix, FFN). A cached decode step attending L alive keys costs
//! 4d² + 2dm + 2d(2L − 1); summing steps L = 1..n reproduces the closed form
//! exactly, in integer arithmetic. Only decoder layers are counted — no
//! vision encoder, no LM head.

use std::io::Write;
use std::path::Path;

use crate::engine::{PruneSchedule, PruneStrategy};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentKind, TokenSegmentation};

/// Dimensions the cost model runs on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Visual tokens in the prompt.
    pub n_visual: usize,
    /// Non-visual prompt tokens (system + instruction).
    pub prompt_text_tokens: usize,
    pub generated_tokens: usize,
}

impl CostConfig {
    /// LLaVA-1.5-7B preset with the documented prompt assumptions:
    /// 35 system + 576 visual + 40 instruction tokens, 32 generated.
    pub fn llava_7b() -> Self {
        CostConfig {
            n_layers: 32,
            d_model: 4096,
            d_ffn: 11008,
            n_visual: 576,
            prompt_text_tokens: 75,
            generated_tokens: 32,
        }
    }

    /// Cost dimensions of a toy run described by a (final) segmentation.
    pub fn for_model(config: &ModelConfig, seg: &TokenSegmentation) -> Self {
        let n_visual = seg.segment_len(SegmentKind::Img);
        let generated = seg.segment_len(SegmentKind::Res);
        let prompt_text =
            seg.segment_len(SegmentKind::Sys) + seg.segment_len(SegmentKind::Ins);
        CostConfig {
            n_layers: config.n_layers,
            d_model: config.d_model,
            d_ffn: config.d_ffn,
            n_visual,
            prompt_text_tokens: prompt_text,
            generated_tokens: generated,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.n_visual + self.prompt_text_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.n_visual == 0 {
            return Err(Error::Config(
                "cost config needs n_layers, d_model, d_ffn, n_visual >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn layer_flops_exact(n: u128, d: u128, m: u128) -> u128 {
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

/// Decoder-layer FLOPs for a batched pass over n tokens: 4nd² + 2n²d + 2ndm.
pub fn layer_flops(n: usize, d: usize, m: usize) -> f64 {
    layer_flops_exact(n as u128, d as u128, m as u128) as f64
}

/// One cached decode step against `alive_keys` keys (query included):
/// 4d² + 2dm for the token's projections and FFN, 2d(2L − 1) for attention.
pub(crate) fn decode_step_flops_exact(alive_keys: u128, d: u128, m: u128) -> u128 {
    4 * d * d + 2 * d * m + 2 * d * (2 * alive_keys - 1)
}

/// FLOPs totals of a schedule against its unpruned twin.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub total_flops: u64,
    pub baseline_flops: u64,
    /// 100 · total / baseline.
    pub ratio_pct: f64,
    pub per_layer: Vec<u64>,
}

fn to_u64(v: u128, what: &str) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::Config(format!("{what} overflows u64")))
}

/// Sum the cost model over a schedule: the prompt pass uses each layer's
/// alive prompt-token count, each decode step each layer's alive key count.
/// The baseline is the same run with nothing pruned.
pub fn schedule_flops(schedule: &PruneSchedule, cfg: &CostConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    if schedule.prefill_per_layer_tokens.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "schedule/config mismatch: {} prefill layer counts for {} layers",
            schedule.prefill_per_layer_tokens.len(),
            cfg.n_layers
        )));
    }
    if schedule.prompt_len != cfg.prompt_len() {
        return Err(Error::Config(format!(
            "schedule/config mismatch: prompt {} vs config {}",
            schedule.prompt_len,
            cfg.prompt_len()
        )));
    }
    if schedule.n_visual != cfg.n_visual {
        return Err(Error::Config(format!(
            "schedule/config mismatch: {} visual tokens vs config {}",
            schedule.n_visual, cfg.n_visual
        )));
    }
    let d = cfg.d_model as u128;
    let m = cfg.d_ffn as u128;
    let mut per_layer = Vec::with_capacity(cfg.n_layers);
    let mut total: u128 = 0;
    for l in 0..cfg.n_layers {
        let mut layer_total = layer_flops_exact(schedule.prefill_per_layer_tokens[l] as u128, d, m);
        for step in &schedule.steps {
            if step.per_layer_keys.len() != cfg.n_layers {
                return Err(Error::Config(format!(
                    "schedule/config mismatch: step {} records {} layers",
                    step.step,
                    step.per_layer_keys.len()
                )));
            }
            layer_total += decode_step_flops_exact(step.per_layer_keys[l] as u128, d, m);
        }
        per_layer.push(to_u64(layer_total, "per-layer FLOPs")?);
        total += layer_total;
    }

    let p = schedule.prompt_len as u128;
    let mut baseline: u128 = cfg.n_layers as u128 * layer_flops_exact(p, d, m);
    for t in 1..=schedule.steps.len() as u128 {
        baseline += cfg.n_layers as u128 * decode_step_flops_exact(p + t, d, m);
    }

    let total_flops = to_u64(total, "total FLOPs")?;
    let baseline_flops = to_u64(baseline, "baseline FLOPs")?;
    let ratio_pct = 100.0 * total_flops as f64 / baseline_flops as f64;
    Ok(FlopsReport { total_flops, baseline_flops, ratio_pct, per_layer })
}

/// FLOPs-per-throughput latency proxy; monotone in total FLOPs.
pub fn latency_proxy(report: &FlopsReport, flops_per_second_budget: f64) -> Result<f64> {
    if !(flops_per_second_budget > 0.0) {
        return Err(Error::Config("throughput budget must be positive".into()));
    }
    Ok(report.total_flops as f64 / flops_per_second_budget)
}

/// Analytic schedule in the published accounting: one forward pass over the
/// prompt, with `visual_dropped` visual tokens absent from every layer at or
/// beyond `from_layer`. No decode steps — the published percentages are
/// prompt-pass dominated.
pub fn analytic_prompt_schedule(
    cfg: &CostConfig,
    name: &str,
    params: &str,
    from_layer: usize,
    visual_dropped: usize,
) -> Result<PruneSchedule> {
    if visual_dropped > cfg.n_visual {
        return Err(Error::Config(format!(
            "cannot drop {visual_dropped} of {} visual tokens",
            cfg.n_visual
        )));
    }
    let full = cfg.prompt_len();
    let prefill_per_layer_tokens = (0..cfg.n_layers)
        .map(|l| if l >= from_layer { full - visual_dropped } else { full })
        .collect();
    Ok(PruneSchedule {
        strategy: name.to_string(),
        params: params.to_string(),
        mode: "analytic".to_string(),
        prompt_len: full,
        n_visual: cfg.n_visual,
        prefill_per_layer_tokens,
        steps: Vec::new(),
        total_flops: 0,
        baseline_flops: 0,
    })
}

/// Analytic schedule for a named strategy. DyRate is modeled at a given mean
/// realized rate via `analytic_dyrate_schedule`.
pub fn analytic_strategy_schedule(
    cfg: &CostConfig,
    strategy: &PruneStrategy,
) -> Result<PruneSchedule> {
    let name = strategy.name();
    let params = strategy.params_string();
    match strategy {
        PruneStrategy::None => analytic_prompt_schedule(cfg, name, &params, cfg.n_layers, 0),
        PruneStrategy::FastV { k_layer, rate } | PruneStrategy::Fp { rate, k_layer } => {
            let dropped = (rate * cfg.n_visual as f64).floor() as usize;
            analytic_prompt_schedule(cfg, name, &params, *k_layer, dropped)
        }
        PruneStrategy::Vtw { k_layer } => {
            analytic_prompt_schedule(cfg, name, &params, *k_layer, cfg.n_visual)
        }
        PruneStrategy::Dp { p_prune_4th, r_prime } => {
            let dropped = ((p_prune_4th + r_prime).min(1.0) * cfg.n_visual as f64).floor() as usize;
            analytic_prompt_schedule(cfg, name, &params, 3, dropped)
        }
        PruneStrategy::DyRate => Err(Error::Config(
            "dyrate needs a realized mean rate; use analytic_dyrate_schedule".into(),
        )),
    }
}

/// DyRate in the published accounting, collapsed to its mean realized rate,
/// pruning from the same layer as FastV's K=3 setting.
pub fn analytic_dyrate_schedule(cfg: &CostConfig, mean_rate: f64) -> Result<PruneSchedule> {
    if !(0.0..=1.0).contains(&mean_rate) {
        return Err(Error::Config(format!("mean rate {mean_rate} outside [0, 1]")));
    }
    let dropped = (mean_rate * cfg.n_visual as f64).floor() as usize;
    analytic_prompt_schedule(cfg, "dyrate", &format!("mean_r={mean_rate}"), 3, dropped)
}

/// One CSV row of the cost report.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub strategy: String,
    pub params: String,
    pub report: FlopsReport,
    pub proxy_latency: f64,
}

pub const COST_CSV_HEADER: &str = "strategy,params,total_flops,ratio_pct,proxy_latency";

pub fn write_cost_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(COST_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.6}\n",
            r.strategy, r.params, r.report.total_flops, r.report.ratio_pct, r.proxy_latency
        ));
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}
