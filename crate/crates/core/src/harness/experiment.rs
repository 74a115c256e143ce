//! Strategy-sweep experiment runner: accuracy, FLOPs ratio, latency proxy,
//! and rate trajectory per strategy, written as CSV.

use std::path::{Path, PathBuf};

use crate::costing::latency_proxy;
use crate::engine::{generate, DecodeConfig, DecodeStrategy, PruneMode, PruneStrategy};
use crate::error::{Error, Result};
use crate::model::Params;
use crate::pruner::{GumbelConfig, PredictorParams};
use crate::workload::{gen_example, SyntheticTask};

/// Evaluation examples live far from both training and held-out streams.
const EVAL_BASE: u64 = 2_000_000;

/// Throughput assumed by the latency proxy, FLOPs per second.
pub const PROXY_THROUGHPUT: f64 = 1e12;

pub const EXPERIMENT_CSV_HEADER: &str =
    "strategy,params,accuracy,flops_pct,latency_proxy,mean_rate";

/// Aggregates over the evaluation examples of one strategy.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub flops_ratio_pct: f64,
    pub latency_proxy: f64,
    pub mean_rate: f64,
    /// Mean selected rate at each step position (DyRate varies, baselines
    /// are flat after their one decision).
    pub per_step_mean_rates: Vec<f64>,
}

/// Run one strategy over `n_examples` fresh evaluation examples with hard
/// pruning and aggregate the results.
pub fn eval_strategy(
    params: &Params,
    predictor: Option<&PredictorParams>,
    task: &SyntheticTask,
    strat: &PruneStrategy,
    decode: &DecodeConfig,
    n_examples: usize,
) -> Result<EvalSummary> {
    if n_examples == 0 {
        return Err(Error::Config("eval_examples must be >= 1".into()));
    }
    let mut acc_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut proxy_sum = 0.0;
    let mut rate_sum = 0.0;
    let mut per_step = vec![0.0; decode.max_new_tokens];
    for i in 0..n_examples {
        let ex = gen_example(task, EVAL_BASE + i as u64)?;
        let (tokens, schedule) = generate(
            params,
            predictor,
            &ex.prompt,
            &ex.seg,
            decode,
            strat,
            PruneMode::InferHard,
        )?;
        let t = decode.max_new_tokens.min(ex.targets.len());
        let correct = tokens
            .iter()
            .zip(ex.targets.iter())
            .take(t)
            .filter(|(a, b)| a == b)
            .count();
        acc_sum += correct as f64 / t as f64;
        ratio_sum += schedule.flops_ratio_pct();
        let report = crate::costing::FlopsReport {
            total_flops: schedule.total_flops,
            baseline_flops: schedule.baseline_flops,
            ratio_pct: schedule.flops_ratio_pct(),
            per_layer: Vec::new(),
        };
        proxy_sum += latency_proxy(&report, PROXY_THROUGHPUT)?;
        rate_sum += schedule.mean_rate();
        for (slot, s) in per_step.iter_mut().zip(schedule.steps.iter()) {
            *slot += s.rate;
        }
    }
    let n = n_examples as f64;
    per_step.iter_mut().for_each(|v| *v /= n);
    Ok(EvalSummary {
        accuracy: acc_sum / n,
        flops_ratio_pct: ratio_sum / n,
        latency_proxy: proxy_sum / n,
        mean_rate: rate_sum / n,
        per_step_mean_rates: per_step,
    })
}

/// File-driven experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub model_ckpt: PathBuf,
    pub predictor_ckpt: Option<PathBuf>,
    pub task: SyntheticTask,
    pub strategies: Vec<PruneStrategy>,
    pub eval_examples: usize,
    pub max_new_tokens: Option<usize>,
    pub prune_layer: usize,
    pub rate_classes: usize,
    pub decode: DecodeStrategy,
    pub seed: u64,
    pub budget_target: f64,
    pub budget_weight: f64,
    pub out_csv: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut model_ckpt: Option<PathBuf> = None;
        let mut spec = ExperimentSpec {
            model_ckpt: PathBuf::new(),
            predictor_ckpt: None,
            task: SyntheticTask::default(),
            strategies: vec![PruneStrategy::None],
            eval_examples: 16,
            max_new_tokens: None,
            prune_layer: 1,
            rate_classes: 4,
            decode: DecodeStrategy::Greedy,
            seed: 0,
            budget_target: 0.5,
            budget_weight: 1.0,
            out_csv: None,
        };
        let mut task_lines = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model_ckpt" => model_ckpt = Some(PathBuf::from(value)),
                "predictor_ckpt" => spec.predictor_ckpt = Some(PathBuf::from(value)),
                "strategies" => {
                    spec.strategies = split_strategies(value)?
                        .iter()
                        .map(|s| PruneStrategy::parse(s))
                        .collect::<Result<Vec<_>>>()?;
                }
                "eval_examples" => {
                    spec.eval_examples = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad eval_examples: {value}")))?
                }
                "max_new_tokens" => {
                    spec.max_new_tokens = Some(
                        value
                            .parse()
                            .map_err(|_| Error::Config(format!("bad max_new_tokens: {value}")))?,
                    )
                }
                "prune_layer" => {
                    spec.prune_layer = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad prune_layer: {value}")))?
                }
                "rate_classes" => {
                    spec.rate_classes = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad rate_classes: {value}")))?
                }
                "decode" => spec.decode = parse_decode(value)?,
                "seed" => {
                    spec.seed =
                        value.parse().map_err(|_| Error::Config(format!("bad seed: {value}")))?
                }
                "budget_target" => {
                    spec.budget_target = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad budget_target: {value}")))?
                }
                "budget_weight" => {
                    spec.budget_weight = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad budget_weight: {value}")))?
                }
                "out" => spec.out_csv = Some(PathBuf::from(value)),
                k if k.starts_with("task.") => {
                    task_lines.push_str(&format!("{} = {}\n", &k[5..], value));
                }
                other => return Err(Error::Config(format!("unknown experiment key: {other}"))),
            }
        }
        spec.task = SyntheticTask::from_config_str(&task_lines)?;
        spec.model_ckpt =
            model_ckpt.ok_or_else(|| Error::Config("experiment needs model_ckpt".into()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_config_str(&text)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.decode.clone(),
            max_new_tokens: self.max_new_tokens.unwrap_or(self.task.response_len),
            prune_layer: self.prune_layer,
            rate_classes: self.rate_classes,
            gumbel: GumbelConfig { seed: self.seed, ..Default::default() },
        }
    }
}

/// Split a strategy list on commas outside parentheses.
pub fn split_strategies(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| Error::Config(format!("unbalanced parens in: {s}")))?;
                cur.push(c);
            }
            ',' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().to_string());
                }
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    if out.is_empty() {
        return Err(Error::Config("empty strategy list".into()));
    }
    Ok(out)
}

fn parse_decode(s: &str) -> Result<DecodeStrategy> {
    let s = s.trim();
    if s == "greedy" {
        return Ok(DecodeStrategy::Greedy);
    }
    if let Some(rest) = s.strip_prefix("top_p(") {
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::Config(format!("bad decode spec: {s}")))?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let p: f64 = parts
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad top_p value in: {s}")))?;
        let seed: u64 = match parts.get(1) {
            Some(v) => {
                v.parse().map_err(|_| Error::Config(format!("bad top_p seed in: {s}")))?
            }
            None => 0,
        };
        return Ok(DecodeStrategy::TopP { p, seed });
    }
    Err(Error::Config(format!("unknown decode strategy: {s}")))
}

/// Run every strategy in the spec and return the CSV report. The first line
/// declares the training objective the predictor was built with.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<String> {
    let params = Params::load(&spec.model_ckpt)?;
    let needs_predictor =
        spec.strategies.iter().any(|s| matches!(s, PruneStrategy::DyRate));
    let predictor = match (&spec.predictor_ckpt, needs_predictor) {
        (Some(path), _) => Some(PredictorParams::load(path)?),
        (None, true) => {
            return Err(Error::Config("spec lists dyrate but no predictor_ckpt".into()))
        }
        (None, false) => None,
    };
    let decode = spec.decode_config();
    let mut csv = format!(
        "# objective=cross_entropy+{}*(mean_rate-{})^2 seed={}\n{}\n",
        spec.budget_weight, spec.budget_target, spec.seed, EXPERIMENT_CSV_HEADER
    );
    for strat in &spec.strategies {
        let pred_ref = if matches!(strat, PruneStrategy::DyRate) {
            predictor.as_ref()
        } else {
            None
        };
        let summary =
            eval_strategy(&params, pred_ref, &spec.task, strat, &decode, spec.eval_examples)?;
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.6},{:.4}\n",
            strat.name(),
            strat.params_string(),
            summary.accuracy,
            summary.flops_ratio_pct,
            summary.latency_proxy,
            summary.mean_rate
        ));
    }
    if let Some(out) = &spec.out_csv {
        std::fs::write(out, &csv).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    Ok(csv)
}
