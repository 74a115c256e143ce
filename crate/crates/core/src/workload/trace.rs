//! Attention-trace files: per-step, per-layer attention rows of the current
//! query, stored as f32 for offline analysis of generation runs (including
//! dumps from external models).
//!
//! Format: magic "DYTR", version u16 LE, u32 LE JSON header length, JSON
//! header, then little-endian f32 payload in record order. Byte layout is
//! fixed little-endian regardless of host.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::StepObserver;
use crate::error::{Error, Result};
use crate::model::{AttentionMaps, LayerAttention, TokenSegmentation};
use crate::numerics::Tensor;
use crate::pruner::segment_shares;

const TRACE_MAGIC: &[u8; 4] = b"DYTR";
const TRACE_VERSION: u16 = 1;

/// One (step, layer) attention row set: n_heads rows over the alive keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// 1-based generation step.
    pub step: usize,
    pub layer: usize,
    /// Alive key positions, strictly increasing.
    pub positions: Vec<u32>,
    /// Row-major [n_heads, positions.len()].
    pub rows: Vec<f32>,
}

/// A full generation's attention trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_steps: usize,
    /// Segmentation covering every position referenced by the records.
    pub segmentation: TokenSegmentation,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    step: usize,
    layer: usize,
    positions: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    n_heads: usize,
    n_layers: usize,
    n_steps: usize,
    segmentation: TokenSegmentation,
    records: Vec<RecordMeta>,
}

impl AttentionTrace {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.rows.len() != self.n_heads * r.positions.len() {
                return Err(Error::Format(format!("record {i}: row size mismatch")));
            }
            if !r.positions.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Format(format!(
                    "record {i}: positions not strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

pub fn write_trace(path: &Path, trace: &AttentionTrace) -> Result<()> {
    trace.validate()?;
    let header = TraceHeader {
        n_heads: trace.n_heads,
        n_layers: trace.n_layers,
        n_steps: trace.n_steps,
        segmentation: trace.segmentation.clone(),
        records: trace
            .records
            .iter()
            .map(|r| RecordMeta { step: r.step, layer: r.layer, positions: r.positions.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let payload_len: usize = trace.records.iter().map(|r| r.rows.len()).sum();
    let mut bytes = Vec::with_capacity(4 + 2 + 4 + json.len() + payload_len * 4);
    bytes.extend_from_slice(TRACE_MAGIC);
    bytes.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for r in &trace.records {
        for v in &r.rows {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 10 || &bytes[..4] != TRACE_MAGIC {
        return Err(Error::Format("not a trace file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trace version {version}, expected {TRACE_VERSION}"
        )));
    }
    let json_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + json_len {
        return Err(Error::Format("truncated header".into()));
    }
    let header: TraceHeader = serde_json::from_slice(&bytes[10..10 + json_len])
        .map_err(|e| Error::Format(format!("bad trace header: {e}")))?;
    let mut payload = &bytes[10 + json_len..];
    let mut records = Vec::with_capacity(header.records.len());
    for meta in header.records {
        let n = header.n_heads * meta.positions.len();
        if payload.len() < n * 4 {
            return Err(Error::Format("truncated payload".into()));
        }
        let rows: Vec<f32> = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        payload = &payload[n * 4..];
        records.push(TraceRecord { step: meta.step, layer: meta.layer, positions: meta.positions, rows });
    }
    if !payload.is_empty() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let trace = AttentionTrace {
        n_heads: header.n_heads,
        n_layers: header.n_layers,
        n_steps: header.n_steps,
        segmentation: header.segmentation,
        records,
    };
    trace.validate()?;
    Ok(trace)
}

/// Segment-share summary of a trace: per step, the head-averaged share of
/// each token type, split into shallow and deep layer groups at n_layers/2.
#[derive(Debug, Clone)]
pub struct ShareTable {
    pub steps: Vec<usize>,
    /// Per step: [sys, img, ins, res] averaged over heads and shallow layers.
    pub shallow: Vec<[f64; 4]>,
    pub deep: Vec<[f64; 4]>,
}

impl ShareTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,group,sys,img,ins,res\n");
        for (i, &step) in self.steps.iter().enumerate() {
            for (group, row) in [("shallow", &self.shallow[i]), ("deep", &self.deep[i])] {
                out.push_str(&format!(
                    "{step},{group},{:.6},{:.6},{:.6},{:.6}\n",
                    row[0], row[1], row[2], row[3]
                ));
            }
        }
        out
    }
}

/// Compute per-record segment shares and the step × type summary table.
/// Rows whose sum strays more than 1e-3 from 1 are rejected with the record
/// index (f32 storage tolerates 1e-4 drift).
pub fn trace_shares(trace: &AttentionTrace) -> Result<(Vec<(usize, usize, Vec<f64>)>, ShareTable)> {
    trace.validate()?;
    let shallow_cut = trace.n_layers / 2;
    let mut per_record = Vec::with_capacity(trace.records.len());
    let mut acc: std::collections::BTreeMap<usize, ([f64; 4], usize, [f64; 4], usize)> =
        std::collections::BTreeMap::new();

    for (i, r) in trace.records.iter().enumerate() {
        let n_keys = r.positions.len();
        for h in 0..trace.n_heads {
            let sum: f64 = r.rows[h * n_keys..(h + 1) * n_keys].iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::Format(format!(
                    "record {i}: head {h} attention row sums to {sum}"
                )));
            }
        }
        let attn = LayerAttention {
            weights: Tensor::new(
                vec![trace.n_heads, 1, n_keys],
                r.rows.iter().map(|&v| v as f64).collect(),
            )?,
            key_positions: r.positions.iter().map(|&p| p as usize).collect(),
        };
        let features = segment_shares(&attn, &trace.segmentation)?;
        per_record.push((r.step, r.layer, features.values().to_vec()));

        // Head-averaged shares of this record.
        let mut mean = [0.0f64; 4];
        for h in 0..trace.n_heads {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += features.values()[h * 4 + k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= trace.n_heads as f64);

        let entry = acc.entry(r.step).or_insert(([0.0; 4], 0, [0.0; 4], 0));
        if r.layer < shallow_cut {
            for k in 0..4 {
                entry.0[k] += mean[k];
            }
            entry.1 += 1;
        } else {
            for k in 0..4 {
                entry.2[k] += mean[k];
            }
            entry.3 += 1;
        }
    }

    let mut table = ShareTable { steps: Vec::new(), shallow: Vec::new(), deep: Vec::new() };
    for (step, (sh, shn, dp, dpn)) in acc {
        table.steps.push(step);
        let norm = |sums: [f64; 4], n: usize| -> [f64; 4] {
            if n == 0 {
                [0.0; 4]
            } else {
                [sums[0] / n as f64, sums[1] / n as f64, sums[2] / n as f64, sums[3] / n as f64]
            }
        };
        table.shallow.push(norm(sh, shn));
        table.deep.push(norm(dp, dpn));
    }
    Ok((per_record, table))
}

/// Builds a trace while a generation runs. Keys whose attention is exactly 0
/// in every head (softly masked-out tokens) are excluded, matching what a
/// hard-pruned run records.
pub struct TraceBuilder {
    n_heads: usize,
    n_layers: usize,
    records: Vec<TraceRecord>,
    n_steps: usize,
    last_seg: Option<TokenSegmentation>,
}

impl TraceBuilder {
    pub fn new(n_heads: usize, n_layers: usize) -> Self {
        TraceBuilder { n_heads, n_layers, records: Vec::new(), n_steps: 0, last_seg: None }
    }

    pub fn finish(self) -> Result<AttentionTrace> {
        let segmentation = self
            .last_seg
            .ok_or_else(|| Error::Config("trace builder observed no steps".into()))?;
        let trace = AttentionTrace {
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_steps: self.n_steps,
            segmentation,
            records: self.records,
        };
        trace.validate()?;
        Ok(trace)
    }
}

impl StepObserver for TraceBuilder {
    fn on_step(
        &mut self,
        step: usize,
        attention: &AttentionMaps,
        _logits: &[f64],
        seg: &TokenSegmentation,
    ) {
        for (layer, la) in attention.layers.iter().enumerate() {
            let shape = la.weights.shape();
            let (n_heads, n_keys) = (shape[0], shape[2]);
            let w = la.weights.data();
            let alive: Vec<usize> = (0..n_keys)
                .filter(|&j| (0..n_heads).any(|h| w[h * n_keys + j] != 0.0))
                .collect();
            let positions: Vec<u32> =
                alive.iter().map(|&j| la.key_positions[j] as u32).collect();
            let mut rows = Vec::with_capacity(n_heads * alive.len());
            for h in 0..n_heads {
                for &j in &alive {
                    rows.push(w[h * n_keys + j] as f32);
                }
            }
            self.records.push(TraceRecord { step, layer, positions, rows });
        }
        self.n_steps = self.n_steps.max(step);
        self.last_seg = Some(seg.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitMix64;

    fn synthetic_trace(seed: u64, n_heads: usize, n_layers: usize, steps: usize) -> AttentionTrace {
        let mut seg = TokenSegmentation::prompt(1, 3, 1).unwrap();
        for _ in 0..steps {
            seg.push_response();
        }
        let mut rng = SplitMix64::new(seed);
        let mut records = Vec::new();
        for step in 1..=steps {
            for layer in 0..n_layers {
                let n_keys = 5 + step;
                let positions: Vec<u32> = (0..n_keys as u32).collect();
                let mut rows = Vec::new();
                for _ in 0..n_heads {
                    let mut row: Vec<f32> =
                        (0..n_keys).map(|_| rng.uniform(0.01, 1.0) as f32).collect();
                    let sum: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= sum);
                    rows.push(row);
                }
                records.push(TraceRecord {
                    step,
                    layer,
                    positions,
                    rows: rows.concat(),
                });
            }
        }
        AttentionTrace { n_heads, n_layers, n_steps: steps, segmentation: seg, records }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dytr");
        let trace = synthetic_trace(3, 2, 4, 3);
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(trace, back);
        // Re-writing the read trace produces identical bytes.
        let path2 = dir.path().join("t2.dytr");
        write_trace(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dytr");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("not a trace file"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dytr");
        let trace = synthetic_trace(4, 2, 2, 2);
        write_trace(&path, &trace).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn uniform_rows_give_length_proportional_shares() {
        let mut seg = TokenSegmentation::prompt(2, 4, 2).unwrap();
        seg.push_response();
        let n_keys = 9;
        let row = vec![1.0 / n_keys as f32; n_keys];
        let trace = AttentionTrace {
            n_heads: 1,
            n_layers: 2,
            n_steps: 1,
            segmentation: seg,
            records: (0..2)
                .map(|layer| TraceRecord {
                    step: 1,
                    layer,
                    positions: (0..n_keys as u32).collect(),
                    rows: row.clone(),
                })
                .collect(),
        };
        let (_, table) = trace_shares(&trace).unwrap();
        let expect = [2.0 / 9.0, 4.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        for (got, want) in table.shallow[0].iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn decaying_img_mass_is_strictly_decreasing() {
        // Construct rows whose img-column mass decays linearly toward 0.
        let steps = 4;
        let mut seg = TokenSegmentation::prompt(1, 2, 1).unwrap();
        for _ in 0..steps {
            seg.push_response();
        }
        let mut records = Vec::new();
        for step in 1..=steps {
            let img_mass = 0.8 * (1.0 - (step - 1) as f32 / steps as f32);
            let n_keys = 4 + step;
            let rest = (1.0 - img_mass) / (n_keys - 2) as f32;
            let mut row = vec![rest; n_keys];
            row[1] = img_mass / 2.0;
            row[2] = img_mass / 2.0;
            records.push(TraceRecord {
                step,
                layer: 0,
                positions: (0..n_keys as u32).collect(),
                rows: row,
            });
        }
        let trace = AttentionTrace {
            n_heads: 1,
            n_layers: 1,
            n_steps: steps,
            segmentation: seg,
            records,
        };
        let (_, table) = trace_shares(&trace).unwrap();
        for w in table.deep.windows(2) {
            assert!(w[1][1] < w[0][1], "img share should strictly decrease");
        }
    }

    #[test]
    fn shares_round_trip_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dytr");
        let trace = synthetic_trace(8, 2, 4, 3);
        let (recs_mem, table_mem) = trace_shares(&trace).unwrap();
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        let (recs_file, table_file) = trace_shares(&back).unwrap();
        assert_eq!(recs_mem.len(), recs_file.len());
        for (a, b) in recs_mem.iter().zip(recs_file.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            for (x, y) in a.2.iter().zip(b.2.iter()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
        for (a, b) in table_mem.shallow.iter().zip(table_file.shallow.iter()) {
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn builder_excludes_soft_masked_keys() {
        use crate::engine::{generate_observed, DecodeConfig, PruneMode, PruneStrategy, StepObserver};
        use crate::model::{init_model, ModelConfig};

        let params = init_model(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: 64,
            max_seq: 64,
            seed: 8,
        })
        .unwrap();
        let seg = TokenSegmentation::prompt(1, 6, 1).unwrap();
        let prompt: Vec<usize> = (0..seg.seq_len()).map(|i| (i * 7) % 64).collect();
        let cfg = DecodeConfig { max_new_tokens: 4, prune_layer: 1, ..Default::default() };
        let strat = PruneStrategy::FastV { k_layer: 1, rate: 0.5 };

        let run = |mode: PruneMode| {
            let mut b = TraceBuilder::new(2, 2);
            generate_observed(
                &params,
                None,
                &prompt,
                &seg,
                &cfg,
                &strat,
                mode,
                Some(&mut b as &mut dyn StepObserver),
            )
            .unwrap();
            b.finish().unwrap()
        };
        let hard = run(PruneMode::InferHard);
        let soft = run(PruneMode::TrainSoft);
        // The soft trace must list exactly the keys the hard run kept.
        assert_eq!(hard.records.len(), soft.records.len());
        for (h, s) in hard.records.iter().zip(soft.records.iter()) {
            assert_eq!(h.positions, s.positions, "step {} layer {}", h.step, h.layer);
            for (a, b) in h.rows.iter().zip(s.rows.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn malformed_row_sum_reports_record_index() {
        let mut trace = synthetic_trace(5, 1, 1, 1);
        trace.records[0].rows[0] += 0.5;
        let err = trace_shares(&trace).unwrap_err();
        assert!(err.to_string().contains("record 0"), "{err}");
    }
}
