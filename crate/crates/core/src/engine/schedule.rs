//! The realized pruning trajectory of one generation run, and its
//! newline-delimited JSON dump format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One generation step's pruning record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based generation step.
    pub step: usize,
    pub token_id: usize,
    /// Rate selected this step (0 when the strategy made no new decision).
    pub rate: f64,
    /// Rate distribution, DyRate only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    pub visual_alive_before: usize,
    pub visual_alive_after: usize,
    pub dropped: usize,
    /// Keys attended at each layer this step, current token included.
    pub per_layer_keys: Vec<usize>,
}

/// Per-run pruning schedule plus FLOPs totals filled in by the cost model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub strategy: String,
    pub params: String,
    pub mode: String,
    pub prompt_len: usize,
    /// Visual tokens in the prompt.
    pub n_visual: usize,
    /// Prompt tokens processed at each layer during prefill. The engine
    /// never prunes the prompt; analytic schedules may reduce deeper layers.
    pub prefill_per_layer_tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub total_flops: u64,
    pub baseline_flops: u64,
}

impl PruneSchedule {
    pub fn new(
        strategy: &super::PruneStrategy,
        mode: &str,
        prompt_len: usize,
        n_visual: usize,
        n_layers: usize,
    ) -> Self {
        PruneSchedule {
            strategy: strategy.name().to_string(),
            params: strategy.params_string(),
            mode: mode.to_string(),
            prompt_len,
            n_visual,
            prefill_per_layer_tokens: vec![prompt_len; n_layers],
            steps: Vec::new(),
            total_flops: 0,
            baseline_flops: 0,
        }
    }

    /// Mean selected rate over the recorded steps.
    pub fn mean_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.rate).sum::<f64>() / self.steps.len() as f64
    }

    pub fn flops_ratio_pct(&self) -> f64 {
        if self.baseline_flops == 0 {
            return 100.0;
        }
        100.0 * self.total_flops as f64 / self.baseline_flops as f64
    }

    /// Alive counts never increase, and each step's bookkeeping balances:
    /// after = before − dropped.
    pub fn check_accounting(&self) -> Result<()> {
        let mut alive = self.n_visual;
        let mut total_dropped = 0usize;
        for s in &self.steps {
            if s.visual_alive_before > alive {
                return Err(Error::Config(format!(
                    "step {}: alive count grew from {alive} to {}",
                    s.step, s.visual_alive_before
                )));
            }
            if s.visual_alive_after + s.dropped != s.visual_alive_before {
                return Err(Error::Config(format!("step {}: drop accounting broken", s.step)));
            }
            total_dropped += s.dropped;
            if s.visual_alive_after != self.n_visual - total_dropped {
                return Err(Error::Config(format!(
                    "step {}: alive {} != N − dropped {}",
                    s.step,
                    s.visual_alive_after,
                    self.n_visual - total_dropped
                )));
            }
            alive = s.visual_alive_after;
        }
        Ok(())
    }
}

/// One JSON object per run, newline-delimited.
pub fn write_schedules(path: &Path, schedules: &[PruneSchedule]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in schedules {
        let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_schedules(path: &Path) -> Result<Vec<PruneSchedule>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PruneSchedule = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
