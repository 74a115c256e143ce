//! Tape-recorded forward graphs: the full-sequence teacher-forced pass used
//! to pretrain the toy model, and the soft-masked decode pass the predictor
//! trains through.

use crate::error::{Error, Result};
use crate::model::{KVCache, ModelConfig, Params, TokenSegmentation};
use crate::numerics::{GradTape, SplitMix64, VarId};
use crate::pruner::{
    build_candidate_masks, gumbel_noise, gumbel_softmax_tape, predict_rate_distribution_tape,
    GumbelConfig,
};

pub(crate) struct TapeLayer {
    ln1_g: VarId,
    ln1_b: VarId,
    wq: VarId,
    bq: VarId,
    wk: VarId,
    bk: VarId,
    wv: VarId,
    bv: VarId,
    wo: VarId,
    bo: VarId,
    ln2_g: VarId,
    ln2_b: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
}

pub(crate) struct TapeModel {
    pub tok_emb: VarId,
    pub pos_emb: VarId,
    pub layers: Vec<TapeLayer>,
    pub lnf_g: VarId,
    pub lnf_b: VarId,
    pub head: VarId,
}

/// Put every model field on the tape, trainable or frozen.
pub(crate) fn register_model(tape: &mut GradTape, params: &Params, trainable: bool) -> TapeModel {
    let mut reg = |data: &[f64], shape: &[usize]| -> VarId {
        if trainable {
            tape.param(data, shape)
        } else {
            tape.constant(data, shape)
        }
    };
    let cfg = &params.config;
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let tok_emb = reg(&params.tok_emb, &[cfg.vocab_size, d]);
    let pos_emb = reg(&params.pos_emb, &[cfg.max_seq, d]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in &params.layers {
        layers.push(TapeLayer {
            ln1_g: reg(&l.ln1_g, &[d]),
            ln1_b: reg(&l.ln1_b, &[d]),
            wq: reg(&l.wq, &[d, d]),
            bq: reg(&l.bq, &[d]),
            wk: reg(&l.wk, &[d, d]),
            bk: reg(&l.bk, &[d]),
            wv: reg(&l.wv, &[d, d]),
            bv: reg(&l.bv, &[d]),
            wo: reg(&l.wo, &[d, d]),
            bo: reg(&l.bo, &[d]),
            ln2_g: reg(&l.ln2_g, &[d]),
            ln2_b: reg(&l.ln2_b, &[d]),
            w1: reg(&l.w1, &[d, f]),
            b1: reg(&l.b1, &[f]),
            w2: reg(&l.w2, &[f, d]),
            b2: reg(&l.b2, &[d]),
        });
    }
    let lnf_g = reg(&params.lnf_g, &[d]);
    let lnf_b = reg(&params.lnf_b, &[d]);
    let head = reg(&params.head, &[d, cfg.vocab_size]);
    TapeModel { tok_emb, pos_emb, layers, lnf_g, lnf_b, head }
}

/// Read accumulated gradients in `Params::fields` order.
pub(crate) fn model_grads(tape: &GradTape, model: &TapeModel) -> Vec<Vec<f64>> {
    let mut out = vec![tape.grad_or_zeros(model.tok_emb), tape.grad_or_zeros(model.pos_emb)];
    for l in &model.layers {
        for id in [
            l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
            l.w1, l.b1, l.w2, l.b2,
        ] {
            out.push(tape.grad_or_zeros(id));
        }
    }
    out.push(tape.grad_or_zeros(model.lnf_g));
    out.push(tape.grad_or_zeros(model.lnf_b));
    out.push(tape.grad_or_zeros(model.head));
    out
}

fn causal_bias(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Teacher-forced causal forward over a full sequence; returns logits
/// [n, vocab] on the tape.
pub(crate) fn forward_sequence(
    tape: &mut GradTape,
    model: &TapeModel,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<VarId> {
    let n = ids.len();
    if n > cfg.max_seq {
        return Err(Error::SeqOverflow { len: n, max_seq: cfg.max_seq });
    }
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = tape.gather_rows(model.tok_emb, ids, d)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(model.pos_emb, &positions, d)?;
    let mut x = tape.add(tok, pos)?;

    let causal = causal_bias(n);
    for layer in &model.layers {
        let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, n, d)?;
        let q0 = tape.matmul(normed, layer.wq, n, d, d)?;
        let q = tape.add_row_broadcast(q0, layer.bq, n, d)?;
        let k0 = tape.matmul(normed, layer.wk, n, d, d)?;
        let k = tape.add_row_broadcast(k0, layer.bk, n, d)?;
        let v0 = tape.matmul(normed, layer.wv, n, d, d)?;
        let v = tape.add_row_broadcast(v0, layer.bv, n, d)?;

        let causal_const = tape.constant(&causal, &[n, n]);
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q_h = tape.slice_cols(q, n, d, h * dh, dh)?;
            let k_h = tape.slice_cols(k, n, d, h * dh, dh)?;
            let v_h = tape.slice_cols(v, n, d, h * dh, dh)?;
            let scores = tape.matmul_tb(q_h, k_h, n, dh, n)?;
            let scaled = tape.scale(scores, scale);
            let biased = tape.add(scaled, causal_const)?;
            let weights = tape.softmax_rows(biased, n, n)?;
            head_outs.push(tape.matmul(weights, v_h, n, n, dh)?);
        }
        let attn = tape.concat_cols(&head_outs, n)?;
        let proj0 = tape.matmul(attn, layer.wo, n, d, d)?;
        let proj = tape.add_row_broadcast(proj0, layer.bo, n, d)?;
        x = tape.add(x, proj)?;

        let normed2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, n, d)?;
        let h1 = tape.matmul(normed2, layer.w1, n, d, cfg.d_ffn)?;
        let h1b = tape.add_row_broadcast(h1, layer.b1, n, cfg.d_ffn)?;
        let act = tape.gelu(h1b);
        let h2 = tape.matmul(act, layer.w2, n, cfg.d_ffn, d)?;
        let h2b = tape.add_row_broadcast(h2, layer.b2, n, d)?;
        x = tape.add(x, h2b)?;
    }
    let final_norm = tape.layer_norm(x, model.lnf_g, model.lnf_b, n, d)?;
    tape.matmul(final_norm, model.head, n, d, cfg.vocab_size)
}

/// What the soft decode graph produced for one example.
pub(crate) struct SoftRun {
    /// Per trained step: logits [1, vocab] on the tape.
    pub step_logits: Vec<VarId>,
    /// Targets aligned with `step_logits`.
    pub step_targets: Vec<usize>,
    /// Per step: the rate distribution π on the tape (soft, pre-sampling).
    pub step_pis: Vec<VarId>,
}

/// Teacher-forced train-soft decode with DyRate decisions on the tape.
///
/// The prompt is prefALLED outside the tape (the model is frozen there);
/// response K/V rows are tape values so mask gradients reach them. Decisions
/// use the straight-through hard sample when `st_hard`, the soft relaxation
/// otherwise; noise streams match the inference engine's.
#[allow(clippy::too_many_arguments)]
pub(crate) fn soft_decode_graph(
    tape: &mut GradTape,
    params: &Params,
    weight: VarId,
    bias: VarId,
    prompt: &[usize],
    seg: &TokenSegmentation,
    targets: &[usize],
    prune_layer: usize,
    rate_classes: usize,
    temperature: f64,
    gumbel_seed: u64,
    st_hard: bool,
) -> Result<SoftRun> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let n_layers = cfg.n_layers;
    let scale = 1.0 / (dh as f64).sqrt();
    if targets.len() < 2 {
        return Err(Error::Config("soft decode needs at least 2 response tokens".into()));
    }

    // Frozen prompt pass.
    let mut cache = KVCache::new(cfg);
    crate::model::prefill(params, prompt, &mut cache)?;
    let p_len = prompt.len();

    let model = register_model(tape, params, false);

    // Per layer: K/V blocks (prefill constant + one tape row per step).
    let mut k_blocks: Vec<Vec<VarId>> = Vec::with_capacity(n_layers);
    let mut v_blocks: Vec<Vec<VarId>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        k_blocks.push(vec![tape.constant(&cache.layers[l].k, &[p_len, d])]);
        v_blocks.push(vec![tape.constant(&cache.layers[l].v, &[p_len, d])]);
    }

    // Running keep state over original positions, for layers >= prune_layer.
    // prev: decisions before this step (applies at the decision layer);
    // cur: including this step's decision (applies to deeper layers).
    let ones = vec![1.0; p_len];
    let mut keep_prev: VarId = tape.constant(&ones, &[p_len]);
    let mut keep_cur: VarId = keep_prev;
    let mut keep_prev_vals: Vec<f64> = ones.clone();

    let mut seg = seg.clone();
    let mut run = SoftRun { step_logits: Vec::new(), step_targets: Vec::new(), step_pis: Vec::new() };

    let steps = targets.len() - 1;
    for t in 1..=steps {
        let token = targets[t - 1];
        seg.push_response();
        let position = seg.seq_len() - 1;
        let n_keys = p_len + t;

        // Grow the keep state with the new (kept) position.
        let one = tape.constant(&[1.0], &[1]);
        keep_prev = tape.concat_rows(&[keep_prev, one], 1)?;
        keep_cur = tape.concat_rows(&[keep_cur, one], 1)?;
        keep_prev_vals.push(1.0);

        let x_row: Vec<f64> = {
            let tok = &params.tok_emb[token * d..(token + 1) * d];
            let pos = &params.pos_emb[position * d..(position + 1) * d];
            tok.iter().zip(pos.iter()).map(|(a, b)| a + b).collect()
        };
        let mut x = tape.constant(&x_row, &[1, d]);

        for l in 0..n_layers {
            let layer = &model.layers[l];
            let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, 1, d)?;
            let q0 = tape.matmul(normed, layer.wq, 1, d, d)?;
            let q = tape.add_row_broadcast(q0, layer.bq, 1, d)?;
            let k0 = tape.matmul(normed, layer.wk, 1, d, d)?;
            let k_row = tape.add_row_broadcast(k0, layer.bk, 1, d)?;
            let v0 = tape.matmul(normed, layer.wv, 1, d, d)?;
            let v_row = tape.add_row_broadcast(v0, layer.bv, 1, d)?;
            k_blocks[l].push(k_row);
            v_blocks[l].push(v_row);

            let k_cat = tape.concat_rows(&k_blocks[l], d)?;
            let v_cat = tape.concat_rows(&v_blocks[l], d)?;

            let mask = if l < prune_layer {
                tape.constant(&vec![1.0; n_keys], &[n_keys])
            } else if l == prune_layer {
                keep_prev
            } else {
                keep_cur
            };

            let mut head_weights = Vec::with_capacity(cfg.n_heads);
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q_h = tape.slice_cols(q, 1, d, h * dh, dh)?;
                let k_h = tape.slice_cols(k_cat, n_keys, d, h * dh, dh)?;
                let v_h = tape.slice_cols(v_cat, n_keys, d, h * dh, dh)?;
                let scores = tape.matmul_tb(q_h, k_h, 1, dh, n_keys)?;
                let scaled = tape.scale(scores, scale);
                let weights = tape.masked_softmax_rows(scaled, mask, 1, n_keys)?;
                head_outs.push(tape.matmul(weights, v_h, 1, n_keys, dh)?);
                head_weights.push(weights);
            }

            if l == prune_layer {
                // Decision: features -> pi -> gumbel -> mixed keep-vector.
                let pi = step_decision_pi(
                    tape,
                    &head_weights,
                    &seg,
                    weight,
                    bias,
                    rate_classes,
                    n_keys,
                )?;
                run.step_pis.push(pi);

                let noise_seed = SplitMix64::stream(gumbel_seed, t as u64).next_u64();
                let mut noise_rng = SplitMix64::new(noise_seed);
                let noise = gumbel_noise(rate_classes, &mut noise_rng);
                let gcfg = GumbelConfig { temperature, hard: st_hard, seed: 0 };
                let y = gumbel_softmax_tape(tape, pi, &noise, &gcfg)?;

                let (expand, dead_fill, alive_positions) = alive_expansion(
                    &keep_prev_vals,
                    n_keys,
                );
                let scores_fwd = head_mean_scores(tape, &head_weights, n_keys, cfg.n_heads);
                let alive_imp: Vec<(usize, f64)> = alive_positions
                    .iter()
                    .filter(|&&p| seg.visual_range().contains(&p))
                    .map(|&p| (p, scores_fwd[p]))
                    .collect();
                let cms =
                    build_candidate_masks(&alive_imp, &seg, &alive_positions, rate_classes)?;
                let cms_matrix = tape.constant(&cms.as_matrix(), &[rate_classes, alive_positions.len()]);
                let m_alive = tape.matmul(y, cms_matrix, 1, rate_classes, alive_positions.len())?;

                let expand_const = tape.constant(&expand, &[alive_positions.len(), n_keys]);
                let scattered = tape.matmul(m_alive, expand_const, 1, alive_positions.len(), n_keys)?;
                let fill_const = tape.constant(&dead_fill, &[n_keys]);
                let expanded = tape.add(scattered, fill_const)?;
                let new_keep = tape.mul(keep_cur, expanded)?;
                keep_prev_vals = tape.value(new_keep).to_vec();
                keep_prev = new_keep;
                keep_cur = new_keep;
            }

            let attn = tape.concat_cols(&head_outs, 1)?;
            let proj0 = tape.matmul(attn, layer.wo, 1, d, d)?;
            let proj = tape.add_row_broadcast(proj0, layer.bo, 1, d)?;
            x = tape.add(x, proj)?;
            let normed2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, 1, d)?;
            let h1 = tape.matmul(normed2, layer.w1, 1, d, cfg.d_ffn)?;
            let h1b = tape.add_row_broadcast(h1, layer.b1, 1, cfg.d_ffn)?;
            let act = tape.gelu(h1b);
            let h2 = tape.matmul(act, layer.w2, 1, cfg.d_ffn, d)?;
            let h2b = tape.add_row_broadcast(h2, layer.b2, 1, d)?;
            x = tape.add(x, h2b)?;
        }

        let final_norm = tape.layer_norm(x, model.lnf_g, model.lnf_b, 1, d)?;
        let logits = tape.matmul(final_norm, model.head, 1, d, cfg.vocab_size)?;
        run.step_logits.push(logits);
        run.step_targets.push(targets[t]);
    }
    Ok(run)
}

/// Segment shares of each head as tape values, concatenated in the fixed
/// feature order, then pushed through the predictor.
fn step_decision_pi(
    tape: &mut GradTape,
    head_weights: &[VarId],
    seg: &TokenSegmentation,
    weight: VarId,
    bias: VarId,
    rate_classes: usize,
    n_keys: usize,
) -> Result<VarId> {
    let mut indicators: Vec<Vec<f64>> = vec![vec![0.0; n_keys]; 4];
    for pos in 0..n_keys {
        let kind = seg.kind_at(pos).ok_or_else(|| {
            Error::Shape(format!("position {pos} not covered by segmentation"))
        })?;
        indicators[kind.index()][pos] = 1.0;
    }
    let indicator_vars: Vec<VarId> =
        indicators.iter().map(|ind| tape.constant(ind, &[n_keys])).collect();

    let mut shares = Vec::with_capacity(head_weights.len() * 4);
    for &w in head_weights {
        for &ind in &indicator_vars {
            shares.push(tape.dot(w, ind)?);
        }
    }
    let features = tape.concat_rows(&shares, 1)?;
    predict_rate_distribution_tape(tape, features, weight, bias, rate_classes)
}

/// Mean-over-heads attention by absolute position (forward values only).
fn head_mean_scores(
    tape: &GradTape,
    head_weights: &[VarId],
    n_keys: usize,
    n_heads: usize,
) -> Vec<f64> {
    let mut mean = vec![0.0; n_keys];
    for &w in head_weights {
        for (v, m) in tape.value(w).iter().zip(mean.iter_mut()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_heads as f64);
    mean
}

/// Scatter matrix from the alive-key domain back to all positions, plus the
/// complement fill (1 at dead positions) and the alive position list.
fn alive_expansion(keep_vals: &[f64], n_keys: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let alive_positions: Vec<usize> =
        (0..n_keys).filter(|&p| keep_vals[p] > 0.0).collect();
    let mut expand = vec![0.0; alive_positions.len() * n_keys];
    for (row, &pos) in alive_positions.iter().enumerate() {
        expand[row * n_keys + pos] = 1.0;
    }
    let mut dead_fill = vec![1.0; n_keys];
    for &pos in &alive_positions {
        dead_fill[pos] = 0.0;
    }
    (expand, dead_fill, alive_positions)
}
