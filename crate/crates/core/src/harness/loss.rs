//! The training objective: task cross-entropy plus a squared budget penalty
//! pulling the mean expected rate toward the target,
//! loss = CE + λ_B · (mean_t E_{π_t}[r] − B)². The budget term reads the
//! soft π, never the sampled one-hot.

use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::numerics::{GradTape, VarId};
use crate::pruner::RateSet;

pub fn total_loss(
    tape: &mut GradTape,
    step_logits: &[VarId],
    step_targets: &[usize],
    step_pis: &[VarId],
    rates: &RateSet,
    cfg: &TrainConfig,
) -> Result<VarId> {
    if step_logits.len() != step_targets.len() {
        return Err(Error::Shape(format!(
            "{} logit steps for {} targets",
            step_logits.len(),
            step_targets.len()
        )));
    }
    if step_logits.is_empty() {
        return Err(Error::Shape("loss needs at least one step".into()));
    }

    let mut ce_sum: Option<VarId> = None;
    for (&logits, &target) in step_logits.iter().zip(step_targets.iter()) {
        let vocab = tape.len_of(logits);
        let ce = tape.cross_entropy_mean(logits, &[target], vocab)?;
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let ce = tape.scale(ce_sum.unwrap(), 1.0 / step_logits.len() as f64);

    if cfg.budget_weight == 0.0 || step_pis.is_empty() {
        return Ok(ce);
    }

    let r_values = rates.rates();
    let r_const = tape.constant(&r_values, &[r_values.len()]);
    let mut er_sum: Option<VarId> = None;
    for &pi in step_pis {
        let er = tape.dot(pi, r_const)?;
        er_sum = Some(match er_sum {
            Some(acc) => tape.add(acc, er)?,
            None => er,
        });
    }
    let er_mean = tape.scale(er_sum.unwrap(), 1.0 / step_pis.len() as f64);
    let target = tape.constant(&[cfg.budget_target], &[]);
    let diff = tape.sub(er_mean, target)?;
    let sq = tape.mul(diff, diff)?;
    let budget = tape.scale(sq, cfg.budget_weight);
    tape.add(ce, budget)
}
