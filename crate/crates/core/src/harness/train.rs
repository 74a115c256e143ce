//! Two-phase training: pretrain the toy decoder on the synthetic task, then
//! freeze it and train the rate predictor end-to-end through soft-masked
//! generation. Plain SGD, deterministic per seed.

use crate::error::{Error, Result};
use crate::harness::graph::{forward_sequence, model_grads, register_model, soft_decode_graph};
use crate::harness::{total_loss, Optimizer, TrainConfig};
use crate::model::{forward_full, init_model, ModelConfig, Params};
use crate::numerics::{GradTape, SplitMix64};
use crate::pruner::{PredictorParams, RateSet};
use crate::workload::{gen_example, SyntheticTask};

/// Held-out examples start here; training draws example indices from
/// step · batch + b, far below.
const HELDOUT_BASE: u64 = 10_000_000;

#[derive(Debug, Clone)]
pub struct TrainCurves {
    pub losses: Vec<f64>,
}

/// First/second-moment state for Adam, one entry per parameter field.
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Apply one update in place. `fields` and `grads` are aligned.
fn apply_update(
    fields: Vec<&mut Vec<f64>>,
    grads: &[Vec<f64>],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (field, grad) in fields.into_iter().zip(grads.iter()) {
                for (w, g) in field.iter_mut().zip(grad.iter()) {
                    *w -= cfg.lr * g;
                }
            }
        }
        Optimizer::Adam => {
            let state = adam.get_or_insert_with(|| {
                AdamState::new(&grads.iter().map(|g| g.len()).collect::<Vec<_>>())
            });
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            for ((field, grad), (m, v)) in fields
                .into_iter()
                .zip(grads.iter())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for i in 0..field.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    field[i] -= cfg.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Teacher-forced pretraining of the decoder on the synthetic task; no
/// pruning anywhere. Fresh examples every step, so the model cannot
/// memorize a finite dataset.
pub fn train_toy_model(
    model_cfg: &ModelConfig,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(Params, TrainCurves)> {
    cfg.validate()?;
    task.validate()?;
    let mut params = init_model(model_cfg)?;
    let vocab = model_cfg.vocab_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut adam: Option<AdamState> = None;

    for step in 0..cfg.steps {
        let mut tape = GradTape::new();
        let model = register_model(&mut tape, &params, true);
        let mut loss_acc = None;
        for b in 0..cfg.batch {
            let ex = gen_example(task, (step * cfg.batch + b) as u64)?;
            let prompt_len = ex.prompt.len();
            let t_len = ex.targets.len();
            let mut ids = ex.prompt.clone();
            ids.extend_from_slice(&ex.targets);
            let logits = forward_sequence(&mut tape, &model, model_cfg, &ids)?;
            // Position p predicts token p+1: response targets are read from
            // rows prompt_len−1 .. prompt_len−1+T.
            let resp = tape.slice_rows(logits, vocab, prompt_len - 1, t_len)?;
            let ce = tape.cross_entropy_mean(resp, &ex.targets, vocab)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let loss = tape.scale(loss_acc.unwrap(), 1.0 / cfg.batch as f64);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step });
        }
        tape.backward(loss)?;
        let grads = model_grads(&tape, &model);
        apply_update(params.fields_mut(), &grads, cfg, &mut adam);
        losses.push(loss_val);
    }
    Ok((params, TrainCurves { losses }))
}

/// Teacher-forced next-token accuracy on held-out examples, no pruning.
pub fn heldout_accuracy(params: &Params, task: &SyntheticTask, n_examples: usize) -> Result<f64> {
    let vocab = params.config.vocab_size;
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..n_examples {
        let ex = gen_example(task, HELDOUT_BASE + i as u64)?;
        let prompt_len = ex.prompt.len();
        let mut ids = ex.prompt.clone();
        ids.extend_from_slice(&ex.targets);
        let logits = forward_full(params, &ids)?;
        for (t, &target) in ex.targets.iter().enumerate() {
            let row = &logits.data()[(prompt_len - 1 + t) * vocab..(prompt_len + t) * vocab];
            let pred = crate::engine::greedy(row);
            if pred == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone)]
pub struct PredictorCurves {
    pub losses: Vec<f64>,
    /// Mean E_π\[r\] over the batch at each training step.
    pub mean_rates: Vec<f64>,
}

/// Train the rate predictor against a frozen model by descending
/// `total_loss` through train-soft generation. The predictor starts biased
/// to keep-all (+2 logit on r_1); the decoder parameters are never touched.
pub fn train_predictor(
    params: &Params,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    prune_layer: usize,
    rate_classes: usize,
) -> Result<(PredictorParams, PredictorCurves)> {
    cfg.validate()?;
    task.validate()?;
    if task.response_len < 2 {
        return Err(Error::Config("predictor training needs response_len >= 2".into()));
    }
    if prune_layer >= params.config.n_layers {
        return Err(Error::Config(format!(
            "prune_layer {prune_layer} must be below n_layers {}",
            params.config.n_layers
        )));
    }
    let rates = RateSet::new(rate_classes)?;
    let mut predictor = PredictorParams::keep_all_init(rate_classes, params.config.n_heads)?;
    let n_feat = predictor.n_features();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut mean_rates = Vec::with_capacity(cfg.steps);
    let mut adam: Option<AdamState> = None;

    for step in 0..cfg.steps {
        let tau = cfg.tau_at(step);
        let mut tape = GradTape::new();
        let weight = tape.param(&predictor.weight, &[rate_classes, n_feat]);
        let bias = tape.param(&predictor.bias, &[rate_classes]);

        let mut loss_acc = None;
        let mut er_sum = 0.0;
        let mut er_count = 0usize;
        for b in 0..cfg.batch {
            let ex_index = (step * cfg.batch + b) as u64;
            let ex = gen_example(task, ex_index)?;
            let gumbel_seed = SplitMix64::stream(cfg.seed, ex_index).next_u64();
            let run = soft_decode_graph(
                &mut tape,
                params,
                weight,
                bias,
                &ex.prompt,
                &ex.seg,
                &ex.targets,
                prune_layer,
                rate_classes,
                tau,
                gumbel_seed,
                true,
            )?;
            for &pi in &run.step_pis {
                let vals = tape.value(pi);
                er_sum += vals
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p * rates.rate(i))
                    .sum::<f64>();
                er_count += 1;
            }
            let ex_loss =
                total_loss(&mut tape, &run.step_logits, &run.step_targets, &run.step_pis, &rates, cfg)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => tape.add(acc, ex_loss)?,
                None => ex_loss,
            });
        }
        let loss = tape.scale(loss_acc.unwrap(), 1.0 / cfg.batch as f64);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step });
        }
        tape.backward(loss)?;
        let grads = vec![tape.grad_or_zeros(weight), tape.grad_or_zeros(bias)];
        apply_update(
            vec![&mut predictor.weight, &mut predictor.bias],
            &grads,
            cfg,
            &mut adam,
        );
        losses.push(loss_val);
        mean_rates.push(if er_count > 0 { er_sum / er_count as f64 } else { 0.0 });
    }
    Ok((predictor, PredictorCurves { losses, mean_rates }))
}
