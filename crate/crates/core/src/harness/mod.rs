//! Training loops and the experiment runner: toy-model pretraining,
//! end-to-end predictor training through soft-masked generation, and the
//! strategy-sweep harness behind the CLI.

mod experiment;
mod graph;
mod loss;
mod train;

pub use experiment::{
    eval_strategy, run_experiment, split_strategies, EvalSummary, ExperimentSpec,
    EXPERIMENT_CSV_HEADER,
};
pub use loss::total_loss;
pub use train::{
    heldout_accuracy, train_predictor, train_toy_model, PredictorCurves, TrainCurves,
};


use crate::error::{Error, Result};

/// Gumbel temperature schedule over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauSchedule {
    Constant,
    Linear,
}

/// Parameter update rule. Plain SGD is the default; Adam is available for
/// the predictor phase, where the budget gradient shrinks near saturated
/// softmax corners and benefits from per-coordinate normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Hyperparameters shared by both training phases. The budget fields only
/// matter for predictor training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_anneal: TauSchedule,
    /// Desired mean drop fraction B ∈ [0, 1).
    pub budget_target: f64,
    /// λ_B ≥ 0.
    pub budget_weight: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 2000,
            batch: 16,
            tau_start: 1.0,
            tau_end: 1.0,
            tau_anneal: TauSchedule::Constant,
            budget_target: 0.5,
            budget_weight: 1.0,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for toy-model pretraining. The type-level defaults (plain
    /// SGD, lr 1e-3) suit the linear predictor phase; fitting the decoder
    /// from scratch within the default 2000 steps wants Adam at a standard
    /// transformer learning rate.
    pub fn pretrain_defaults() -> Self {
        TrainConfig { lr: 2e-3, optimizer: Optimizer::Adam, ..Default::default() }
    }

    /// Defaults for predictor training: a shorter schedule on the handful
    /// of linear parameters, Adam so the budget term keeps its pull near
    /// saturated rate distributions.
    pub fn predictor_defaults() -> Self {
        TrainConfig {
            lr: 0.02,
            steps: 300,
            batch: 8,
            budget_weight: 4.0,
            optimizer: Optimizer::Adam,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be >= 1".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("tau must stay positive".into()));
        }
        if !(0.0..1.0).contains(&self.budget_target) {
            return Err(Error::Config("budget_target must be in [0, 1)".into()));
        }
        if !(self.budget_weight >= 0.0) {
            return Err(Error::Config("budget_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match self.tau_anneal {
            TauSchedule::Constant => self.tau_start,
            TauSchedule::Linear => {
                if self.steps <= 1 {
                    return self.tau_end;
                }
                let f = step as f64 / (self.steps - 1) as f64;
                self.tau_start + (self.tau_end - self.tau_start) * f
            }
        }
    }

    /// One-line declaration of the training objective for report headers.
    pub fn objective_string(&self) -> String {
        format!(
            "cross_entropy+{}*(mean_rate-{})^2",
            self.budget_weight, self.budget_target
        )
    }
}
