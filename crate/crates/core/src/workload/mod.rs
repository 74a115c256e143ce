//! Synthetic multimodal-style sequence tasks with controllable visual
//! redundancy, plus the attention-trace file format for offline analysis.
//!
//! Task rule (two-hop indirect copy): at response step t, a dataset-level
//! pointer schedule names a visual slot p_t (two schedules; the first
//! instruction token's parity picks one). The value stored there selects a
//! second slot hop2_t = (value − IMG_BASE) / stride, and the target is the
//! value at *that* slot. Pointer reads are position-routable in the first
//! layer, but the second hop depends on token content, so the model must
//! attend visual tokens in deeper layers — exactly the layers pruning
//! touches. Values at pointed slots are constrained so hop2_t < n_t with
//! n_t = max(1, floor(exp(−λ·t) · s · n_img)): later steps draw their
//! targets from an exponentially shrinking prefix of the visual span, and
//! everything outside it is prunable redundancy.

mod trace;

pub use trace::{
    read_trace, trace_shares, write_trace, AttentionTrace, ShareTable, TraceBuilder, TraceRecord,
};

use crate::error::{Error, Result};
use crate::model::TokenSegmentation;
use crate::numerics::SplitMix64;

/// First system-token id.
pub const SYS_BASE: usize = 1;
/// Instruction ids live in [INS_BASE, INS_BASE + INS_VALUES).
pub const INS_BASE: usize = 32;
pub const INS_VALUES: usize = 16;
/// Visual values (and response targets) live in [IMG_BASE, IMG_BASE + IMG_VALUES).
pub const IMG_BASE: usize = 64;
pub const IMG_VALUES: usize = 64;

/// Generator settings for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub n_sys: usize,
    pub n_img: usize,
    pub n_ins: usize,
    /// Response length T.
    pub response_len: usize,
    /// Redundancy decay λ ≥ 0; 0 keeps the needed-token count constant.
    pub lambda: f64,
    /// Fraction of visual tokens that are ever needed, in (0, 1].
    pub salient_fraction: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            seed: 0,
            n_sys: 2,
            n_img: 6,
            n_ins: 2,
            response_len: 6,
            lambda: 0.0,
            salient_fraction: 1.0,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_img < 1 {
            return Err(Error::Config("task needs n_img >= 1".into()));
        }
        if self.n_img > IMG_VALUES {
            return Err(Error::Config(format!(
                "n_img {} exceeds the visual vocabulary ({IMG_VALUES})",
                self.n_img
            )));
        }
        if self.n_sys > INS_BASE - SYS_BASE {
            return Err(Error::Config(format!("n_sys {} too large", self.n_sys)));
        }
        if self.response_len < 1 {
            return Err(Error::Config("response_len must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction <= 1.0) {
            return Err(Error::Config("salient_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.n_sys + self.n_img + self.n_ins
    }

    /// Visual tokens the target rule may read at step t (0-based):
    /// max(1, floor(exp(−λ·t) · s · n_img)).
    pub fn needed_counts(&self) -> Vec<usize> {
        (0..self.response_len)
            .map(|t| {
                let raw = (-self.lambda * t as f64).exp()
                    * self.salient_fraction
                    * self.n_img as f64;
                (raw.floor() as usize).max(1).min(self.n_img)
            })
            .collect()
    }

    /// Visual-value stride: hop2 = (value − IMG_BASE) / stride.
    pub fn value_stride(&self) -> usize {
        (IMG_VALUES / self.n_img).max(1)
    }

    /// Dataset-level pointer schedules: at step t the rule first reads
    /// visual slot p_t (any slot). Two schedules are drawn; the first
    /// instruction token's parity picks which applies to an example.
    pub fn pointer_schedules(&self) -> [Vec<usize>; 2] {
        let draw = |stream: u64| -> Vec<usize> {
            let mut rng = SplitMix64::stream(self.seed, stream);
            (0..self.response_len).map(|_| rng.below(self.n_img)).collect()
        };
        [draw(7), draw(8)]
    }

    /// Serialize as key = value lines.
    pub fn to_config_string(&self) -> String {
        format!(
            "seed = {}\nn_sys = {}\nn_img = {}\nn_ins = {}\nresponse_len = {}\nlambda = {}\nsalient_fraction = {}\n",
            self.seed,
            self.n_sys,
            self.n_img,
            self.n_ins,
            self.response_len,
            self.lambda,
            self.salient_fraction
        )
    }

    /// Parse key = value lines; `#` starts a comment.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut task = SyntheticTask::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: bad integer {value}", ln + 1)))
            };
            let parse_f64 = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: bad number {value}", ln + 1)))
            };
            match key {
                "seed" => {
                    task.seed = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad seed {value}", ln + 1))
                    })?
                }
                "n_sys" => task.n_sys = parse_usize()?,
                "n_img" => task.n_img = parse_usize()?,
                "n_ins" => task.n_ins = parse_usize()?,
                "response_len" => task.response_len = parse_usize()?,
                "lambda" => task.lambda = parse_f64()?,
                "salient_fraction" => task.salient_fraction = parse_f64()?,
                other => return Err(Error::Config(format!("unknown task key: {other}"))),
            }
        }
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_config_str(&text)
    }
}

/// One generated example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub seg: TokenSegmentation,
    pub targets: Vec<usize>,
}

/// Generate example `index` of the dataset. Deterministic in (seed, index).
///
/// Values at pointed slots are drawn from the narrowest range any pointer
/// using the slot demands, so every hop2 index lands inside its step's
/// needed prefix [0, n_t).
pub fn gen_example(task: &SyntheticTask, index: u64) -> Result<Example> {
    task.validate()?;
    let schedules = task.pointer_schedules();
    let counts = task.needed_counts();
    let stride = task.value_stride();
    let mut rng = SplitMix64::stream(task.seed, 1_000_003 + index);

    let mut prompt = Vec::with_capacity(task.prompt_len());
    for j in 0..task.n_sys {
        prompt.push(SYS_BASE + j);
    }
    let mut img_values: Vec<usize> =
        (0..task.n_img).map(|_| IMG_BASE + rng.below(IMG_VALUES)).collect();

    // Narrowest constraint per pointed slot: value < IMG_BASE + n_t·stride.
    let mut limit = vec![IMG_VALUES; task.n_img];
    for schedule in &schedules {
        for (t, &p) in schedule.iter().enumerate() {
            limit[p] = limit[p].min(counts[t] * stride);
        }
    }
    for (slot, &lim) in limit.iter().enumerate() {
        if lim < IMG_VALUES {
            img_values[slot] = IMG_BASE + rng.below(lim);
        }
    }
    prompt.extend_from_slice(&img_values);
    let ins_values: Vec<usize> =
        (0..task.n_ins).map(|_| INS_BASE + rng.below(INS_VALUES)).collect();
    prompt.extend_from_slice(&ins_values);

    // Parity of the first instruction token picks the pointer schedule; a
    // prompt without instructions always uses schedule 0.
    let parity = ins_values.first().map(|v| v % 2).unwrap_or(0);
    let targets: Vec<usize> = schedules[parity]
        .iter()
        .map(|&p| {
            let hop2 = (img_values[p] - IMG_BASE) / stride;
            img_values[hop2]
        })
        .collect();

    let seg = TokenSegmentation::prompt(task.n_sys, task.n_img, task.n_ins)?;
    Ok(Example { prompt, seg, targets })
}

/// The single-example entry point; example 0 of the dataset.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<Example> {
    gen_example(task, 0)
}
