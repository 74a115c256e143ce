//! Inference-path forward passes: monolithic reference, batched prefill, and
//! single-token decode against the KV cache. Keys masked to zero weight
//! contribute exactly nothing, so masking and physical deletion agree
//! bit-for-bit on retained queries.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params, TokenSegmentation};
use crate::numerics::linalg::{
    gelu_scalar, layer_norm_rows, masked_softmax_row, matmul_kernel as matmul, matmul_tb_kernel as matmul_tb,
};
use crate::numerics::Tensor;

/// Per-layer cached keys/values with original-position bookkeeping.
/// Rows are [n_cached, d_model], head-major within each row; after hard
/// compaction `alive` is all-true and positions stay strictly increasing.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub alive: Vec<bool>,
    pub positions: Vec<usize>,
}

impl LayerCache {
    fn new() -> Self {
        LayerCache { k: Vec::new(), v: Vec::new(), alive: Vec::new(), positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, k_row: &[f64], v_row: &[f64], position: usize) {
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
        self.alive.push(true);
        self.positions.push(position);
    }

    /// Drop entries where keep is false. Survivor order (and with it the
    /// original positions) is preserved.
    pub fn retain(&mut self, keep: &[bool], d_model: usize) {
        debug_assert_eq!(keep.len(), self.len());
        let mut write = 0;
        for read in 0..self.len() {
            if keep[read] {
                if write != read {
                    let (src, dst) = (read * d_model, write * d_model);
                    self.k.copy_within(src..src + d_model, dst);
                    self.v.copy_within(src..src + d_model, dst);
                    self.positions[write] = self.positions[read];
                }
                write += 1;
            }
        }
        self.k.truncate(write * d_model);
        self.v.truncate(write * d_model);
        self.positions.truncate(write);
        self.alive.clear();
        self.alive.resize(write, true);
    }
}

/// One cache per decoder layer; layers may hold different survivor sets.
#[derive(Debug, Clone)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
    d_model: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        KVCache {
            layers: (0..config.n_layers).map(|_| LayerCache::new()).collect(),
            d_model: config.d_model,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Post-softmax attention of the current query, one record per layer.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    /// [n_heads, 1, n_keys]
    pub weights: Tensor,
    /// Original absolute position of each key column.
    pub key_positions: Vec<usize>,
}

/// Attention maps retained for the current generation step only.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub layers: Vec<LayerAttention>,
}

/// Result of one decode step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub attention: AttentionMaps,
}

/// Scaled dot-product attention for one head group with an externally
/// composed mask (causal structure included). Logits of masked keys act as
/// −∞: their weights are exactly 0. A query row with no unmasked key is an
/// error.
pub fn attention_with_mask(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n_q, dh) = (q.shape()[0], q.shape()[1]);
    let n_k = k.shape()[0];
    if k.shape()[1] != dh || v.shape()[0] != n_k {
        return Err(Error::Shape("attention q/k/v shapes inconsistent".into()));
    }
    if mask.shape() != [n_q, n_k] {
        return Err(Error::Shape(format!(
            "mask shape {:?} != [{n_q}, {n_k}]",
            mask.shape()
        )));
    }
    let dv = v.shape()[1];
    let scale = 1.0 / (dh as f64).sqrt();

    let mut weights = vec![0.0; n_q * n_k];
    matmul_tb(q.data(), k.data(), &mut weights, n_q, dh, n_k);
    for w in weights.iter_mut() {
        *w *= scale;
    }
    for i in 0..n_q {
        let row = &mut weights[i * n_k..(i + 1) * n_k];
        if !masked_softmax_row(row, &mask.data()[i * n_k..(i + 1) * n_k]) {
            return Err(Error::QueryFullyMasked);
        }
    }
    let mut out = vec![0.0; n_q * dv];
    matmul(&weights, v.data(), &mut out, n_q, n_k, dv);
    Ok((Tensor::new(vec![n_q, dv], out)?, Tensor::new(vec![n_q, n_k], weights)?))
}

fn embed(params: &Params, token_id: usize, position: usize) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if token_id >= cfg.vocab_size {
        return Err(Error::Config(format!("token id {token_id} >= vocab {}", cfg.vocab_size)));
    }
    if position >= cfg.max_seq {
        return Err(Error::SeqOverflow { len: position + 1, max_seq: cfg.max_seq });
    }
    let d = cfg.d_model;
    Ok(params.tok_emb[token_id * d..(token_id + 1) * d]
        .iter()
        .zip(params.pos_emb[position * d..(position + 1) * d].iter())
        .map(|(t, p)| t + p)
        .collect())
}

fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    matmul(x, w, &mut out, rows, d_in, d_out);
    for i in 0..rows {
        for j in 0..d_out {
            out[i * d_out + j] += b[j];
        }
    }
    out
}

fn ffn(x: &[f64], layer: &crate::model::LayerParams, rows: usize, d: usize, f: usize) -> Vec<f64> {
    let mut h = linear(x, &layer.w1, &layer.b1, rows, d, f);
    for v in h.iter_mut() {
        *v = gelu_scalar(*v);
    }
    linear(&h, &layer.w2, &layer.b2, rows, f, d)
}

/// Monolithic causal forward over a full sequence; returns logits [n, vocab].
/// The no-prune reference every cached path is checked against.
pub fn forward_full(params: &Params, token_ids: &[usize]) -> Result<Tensor> {
    let cfg = &params.config;
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::Config("empty sequence".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::SeqOverflow { len: n, max_seq: cfg.max_seq });
    }
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let h_count = cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Vec::with_capacity(n * d);
    for (i, &t) in token_ids.iter().enumerate() {
        x.extend(embed(params, t, i)?);
    }

    for layer in &params.layers {
        let mut normed = x.clone();
        layer_norm_rows(&mut normed, &layer.ln1_g, &layer.ln1_b, n, d);
        let q = linear(&normed, &layer.wq, &layer.bq, n, d, d);
        let k = linear(&normed, &layer.wk, &layer.bk, n, d, d);
        let v = linear(&normed, &layer.wv, &layer.bv, n, d, d);

        let mut attn_out = vec![0.0; n * d];
        for h in 0..h_count {
            let off = h * dh;
            for i in 0..n {
                // Causal: keys 0..=i only.
                let qrow = &q[i * d + off..i * d + off + dh];
                let mut scores = vec![0.0; i + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &k[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += qrow[c] * krow[c];
                    }
                    *s = acc * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                let orow = &mut attn_out[i * d + off..i * d + off + dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        orow[c] += w * vrow[c];
                    }
                }
            }
        }
        let proj = linear(&attn_out, &layer.wo, &layer.bo, n, d, d);
        for (xi, pi) in x.iter_mut().zip(proj.iter()) {
            *xi += pi;
        }

        let mut normed2 = x.clone();
        layer_norm_rows(&mut normed2, &layer.ln2_g, &layer.ln2_b, n, d);
        let f_out = ffn(&normed2, layer, n, d, cfg.d_ffn);
        for (xi, fi) in x.iter_mut().zip(f_out.iter()) {
            *xi += fi;
        }
    }

    layer_norm_rows(&mut x, &params.lnf_g, &params.lnf_b, n, d);
    let mut logits = vec![0.0; n * cfg.vocab_size];
    matmul(&x, &params.head, &mut logits, n, d, cfg.vocab_size);
    Tensor::new(vec![n, cfg.vocab_size], logits)
}

/// Batched prompt pass. Fills every layer's cache and returns the logits of
/// the last prompt position. The prompt is never pruned.
pub fn prefill(params: &Params, token_ids: &[usize], cache: &mut KVCache) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::Config("empty prompt".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::SeqOverflow { len: n, max_seq: cfg.max_seq });
    }
    if !cache.layers.iter().all(|l| l.is_empty()) {
        return Err(Error::Config("prefill requires an empty cache".into()));
    }
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let h_count = cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Vec::with_capacity(n * d);
    for (i, &t) in token_ids.iter().enumerate() {
        x.extend(embed(params, t, i)?);
    }

    for (l, layer) in params.layers.iter().enumerate() {
        let mut normed = x.clone();
        layer_norm_rows(&mut normed, &layer.ln1_g, &layer.ln1_b, n, d);
        let q = linear(&normed, &layer.wq, &layer.bq, n, d, d);
        let k = linear(&normed, &layer.wk, &layer.bk, n, d, d);
        let v = linear(&normed, &layer.wv, &layer.bv, n, d, d);

        for i in 0..n {
            cache.layers[l].push(&k[i * d..(i + 1) * d], &v[i * d..(i + 1) * d], i);
        }

        let mut attn_out = vec![0.0; n * d];
        for h in 0..h_count {
            let off = h * dh;
            for i in 0..n {
                let qrow = &q[i * d + off..i * d + off + dh];
                let mut scores = vec![0.0; i + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &k[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += qrow[c] * krow[c];
                    }
                    *s = acc * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                let orow = &mut attn_out[i * d + off..i * d + off + dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        orow[c] += w * vrow[c];
                    }
                }
            }
        }
        let proj = linear(&attn_out, &layer.wo, &layer.bo, n, d, d);
        for (xi, pi) in x.iter_mut().zip(proj.iter()) {
            *xi += pi;
        }

        let mut normed2 = x.clone();
        layer_norm_rows(&mut normed2, &layer.ln2_g, &layer.ln2_b, n, d);
        let f_out = ffn(&normed2, layer, n, d, cfg.d_ffn);
        for (xi, fi) in x.iter_mut().zip(f_out.iter()) {
            *xi += fi;
        }
    }

    let mut last = x[(n - 1) * d..n * d].to_vec();
    layer_norm_rows(&mut last, &params.lnf_g, &params.lnf_b, 1, d);
    let mut logits = vec![0.0; cfg.vocab_size];
    matmul(&last, &params.head, &mut logits, 1, d, cfg.vocab_size);
    Ok(logits)
}

/// Layer-by-layer decode of one token, so callers can inspect attention at a
/// chosen layer and adjust masks or compact the cache before deeper layers
/// run. `decode_step` wraps this for the fixed-mask case.
pub struct DecodeSession<'p> {
    params: &'p Params,
    x: Vec<f64>,
    next_layer: usize,
    maps: Vec<LayerAttention>,
    position: usize,
}

impl<'p> DecodeSession<'p> {
    pub fn start(params: &'p Params, token_id: usize, seg: &TokenSegmentation) -> Result<Self> {
        let position = seg.seq_len().checked_sub(1).ok_or_else(|| {
            Error::Config("segmentation does not cover the token being decoded".into())
        })?;
        Ok(DecodeSession {
            params,
            x: embed(params, token_id, position)?,
            next_layer: 0,
            maps: Vec::with_capacity(params.config.n_layers),
            position,
        })
    }

    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    /// Process one decoder layer. Appends this token's K/V to the layer's
    /// cache, attends under `mask` (length = that layer's keys including the
    /// new entry; fractional values allowed on the soft path), and returns
    /// the layer's attention map.
    pub fn advance_layer(&mut self, cache: &mut KVCache, mask: &[f64]) -> Result<&LayerAttention> {
        let cfg = &self.params.config;
        let l = self.next_layer;
        if l >= cfg.n_layers {
            return Err(Error::Config("all layers already processed".into()));
        }
        let layer = &self.params.layers[l];
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let h_count = cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut normed = self.x.clone();
        layer_norm_rows(&mut normed, &layer.ln1_g, &layer.ln1_b, 1, d);
        let q = linear(&normed, &layer.wq, &layer.bq, 1, d, d);
        let k = linear(&normed, &layer.wk, &layer.bk, 1, d, d);
        let v = linear(&normed, &layer.wv, &layer.bv, 1, d, d);

        cache.layers[l].push(&k, &v, self.position);
        let n_keys = cache.layers[l].len();
        if mask.len() != n_keys {
            return Err(Error::Shape(format!(
                "layer {l}: mask covers {} keys, cache holds {n_keys}",
                mask.len()
            )));
        }

        let kc = &cache.layers[l].k;
        let vc = &cache.layers[l].v;
        let mut weights = vec![0.0; h_count * n_keys];
        let mut attn_out = vec![0.0; d];
        for h in 0..h_count {
            let off = h * dh;
            let qrow = &q[off..off + dh];
            let wrow = &mut weights[h * n_keys..(h + 1) * n_keys];
            for (j, w) in wrow.iter_mut().enumerate() {
                let krow = &kc[j * d + off..j * d + off + dh];
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += qrow[c] * krow[c];
                }
                *w = acc * scale;
            }
            if !masked_softmax_row(wrow, mask) {
                return Err(Error::QueryFullyMasked);
            }
            let orow = &mut attn_out[off..off + dh];
            for (j, &w) in wrow.iter().enumerate() {
                // Skipping exact-zero weights keeps the soft-masked sum
                // bit-identical to the compacted one.
                if w == 0.0 {
                    continue;
                }
                let vrow = &vc[j * d + off..j * d + off + dh];
                for c in 0..dh {
                    orow[c] += w * vrow[c];
                }
            }
        }
        self.maps.push(LayerAttention {
            weights: Tensor::new(vec![h_count, 1, n_keys], weights)?,
            key_positions: cache.layers[l].positions.clone(),
        });

        let proj = linear(&attn_out, &layer.wo, &layer.bo, 1, d, d);
        for (xi, pi) in self.x.iter_mut().zip(proj.iter()) {
            *xi += pi;
        }
        let mut normed2 = self.x.clone();
        layer_norm_rows(&mut normed2, &layer.ln2_g, &layer.ln2_b, 1, d);
        let f_out = ffn(&normed2, layer, 1, d, cfg.d_ffn);
        for (xi, fi) in self.x.iter_mut().zip(f_out.iter()) {
            *xi += fi;
        }

        self.next_layer += 1;
        Ok(self.maps.last().unwrap())
    }

    /// Final layer norm and LM head; consumes the session.
    pub fn finish(mut self) -> Result<StepOutput> {
        let cfg = &self.params.config;
        if self.next_layer != cfg.n_layers {
            return Err(Error::Config(format!(
                "finish called after {} of {} layers",
                self.next_layer, cfg.n_layers
            )));
        }
        let d = cfg.d_model;
        layer_norm_rows(&mut self.x, &self.params.lnf_g, &self.params.lnf_b, 1, d);
        let mut logits = vec![0.0; cfg.vocab_size];
        matmul(&self.x, &self.params.head, &mut logits, 1, d, cfg.vocab_size);
        Ok(StepOutput { logits, attention: AttentionMaps { layers: self.maps } })
    }
}

/// One generation step: appends the token's K/V to every layer, attends the
/// new query against that layer's keys under the given keep-mask, and
/// returns logits plus per-layer attention of the current query.
///
/// `prune_masks[l]` covers the keys of layer `l` *including* the entry being
/// appended (the query's own position, which the mask composer pins to 1).
/// Mask values may be fractional on the soft training path.
pub fn decode_step(
    params: &Params,
    token_id: usize,
    cache: &mut KVCache,
    seg: &TokenSegmentation,
    prune_masks: &[Vec<f64>],
) -> Result<StepOutput> {
    let cfg = &params.config;
    if prune_masks.len() != cfg.n_layers {
        return Err(Error::Shape(format!(
            "expected {} prune masks, got {}",
            cfg.n_layers,
            prune_masks.len()
        )));
    }
    let mut session = DecodeSession::start(params, token_id, seg)?;
    for mask in prune_masks {
        session.advance_layer(cache, mask)?;
    }
    session.finish()
}
