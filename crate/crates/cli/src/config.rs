//! Key = value configuration files for the training and generation
//! subcommands. Keys are prefixed by section: `model.*`, `task.*`,
//! `train.*`, plus a few top-level generation settings.

use std::path::Path;

use dyrate_core::engine::DecodeStrategy;
use dyrate_core::error::{Error, Result};
use dyrate_core::harness::{Optimizer, TauSchedule, TrainConfig};
use dyrate_core::model::ModelConfig;
use dyrate_core::workload::SyntheticTask;

#[derive(Debug, Clone)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub train: TrainConfig,
    pub prune_layer: usize,
    pub rate_classes: usize,
    pub decode: DecodeStrategy,
    pub max_new_tokens: Option<usize>,
}

impl LabConfig {
    pub fn with_defaults(train: TrainConfig) -> Self {
        LabConfig {
            model: ModelConfig::default(),
            task: SyntheticTask::default(),
            train,
            prune_layer: 1,
            rate_classes: 4,
            decode: DecodeStrategy::Greedy,
            max_new_tokens: None,
        }
    }

    pub fn load(path: Option<&Path>, train_base: TrainConfig) -> Result<Self> {
        let mut cfg = LabConfig::with_defaults(train_base);
        let Some(path) = path else { return Ok(cfg) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
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
            let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {value}", ln + 1));
            match key {
                "model.n_layers" => cfg.model.n_layers = value.parse().map_err(|_| bad("int"))?,
                "model.n_heads" => cfg.model.n_heads = value.parse().map_err(|_| bad("int"))?,
                "model.d_model" => cfg.model.d_model = value.parse().map_err(|_| bad("int"))?,
                "model.d_ffn" => cfg.model.d_ffn = value.parse().map_err(|_| bad("int"))?,
                "model.vocab_size" => {
                    cfg.model.vocab_size = value.parse().map_err(|_| bad("int"))?
                }
                "model.max_seq" => cfg.model.max_seq = value.parse().map_err(|_| bad("int"))?,
                "model.seed" => cfg.model.seed = value.parse().map_err(|_| bad("seed"))?,
                "train.lr" => cfg.train.lr = value.parse().map_err(|_| bad("number"))?,
                "train.steps" => cfg.train.steps = value.parse().map_err(|_| bad("int"))?,
                "train.batch" => cfg.train.batch = value.parse().map_err(|_| bad("int"))?,
                "train.tau_start" => {
                    cfg.train.tau_start = value.parse().map_err(|_| bad("number"))?
                }
                "train.tau_end" => cfg.train.tau_end = value.parse().map_err(|_| bad("number"))?,
                "train.tau_anneal" => {
                    cfg.train.tau_anneal = match value {
                        "constant" => TauSchedule::Constant,
                        "linear" => TauSchedule::Linear,
                        _ => return Err(bad("tau_anneal (constant|linear)")),
                    }
                }
                "train.budget_target" => {
                    cfg.train.budget_target = value.parse().map_err(|_| bad("number"))?
                }
                "train.budget_weight" => {
                    cfg.train.budget_weight = value.parse().map_err(|_| bad("number"))?
                }
                "train.seed" => cfg.train.seed = value.parse().map_err(|_| bad("seed"))?,
                "train.optimizer" => {
                    cfg.train.optimizer = match value {
                        "sgd" => Optimizer::Sgd,
                        "adam" => Optimizer::Adam,
                        _ => return Err(bad("optimizer (sgd|adam)")),
                    }
                }
                "prune_layer" => cfg.prune_layer = value.parse().map_err(|_| bad("int"))?,
                "rate_classes" => cfg.rate_classes = value.parse().map_err(|_| bad("int"))?,
                "max_new_tokens" => {
                    cfg.max_new_tokens = Some(value.parse().map_err(|_| bad("int"))?)
                }
                "decode" => {
                    cfg.decode = if value == "greedy" {
                        DecodeStrategy::Greedy
                    } else if let Some(rest) =
                        value.strip_prefix("top_p(").and_then(|r| r.strip_suffix(')'))
                    {
                        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
                        let p = parts
                            .first()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad("top_p"))?;
                        let seed = match parts.get(1) {
                            Some(v) => v.parse().map_err(|_| bad("top_p seed"))?,
                            None => 0,
                        };
                        DecodeStrategy::TopP { p, seed }
                    } else {
                        return Err(bad("decode (greedy|top_p(p,seed))"));
                    }
                }
                k if k.starts_with("task.") => {
                    task_lines.push_str(&format!("{} = {}\n", &k[5..], value));
                }
                other => return Err(Error::Config(format!("unknown config key: {other}"))),
            }
        }
        if !task_lines.is_empty() {
            cfg.task = SyntheticTask::from_config_str(&task_lines)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The global --seed flag pins every seed in one stroke.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.train.seed = seed;
    }
}
