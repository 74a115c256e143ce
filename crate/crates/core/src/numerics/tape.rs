//! Wengert tape for reverse-mode differentiation over f64 buffers.
//!
//! Forward calls compute immediately and record one op each; `backward`
//! replays the record in reverse, accumulating vector-Jacobian products.
//! A tape is owned by exactly one training or generation session.

use crate::error::{Error, Result};
use crate::numerics::linalg::{
    gelu_grad_scalar, gelu_scalar, matmul_kernel, matmul_ta_accum, matmul_tb_kernel, LN_EPS,
};
use crate::numerics::tensor::Tensor;

/// Handle to a buffer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

enum Op {
    /// out[m,n] = A[m,k] @ B[k,n]
    Matmul { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    /// out[m,n] = A[m,k] @ B[n,k]^T
    MatmulTransposeB { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId, out: VarId },
    Sub { a: VarId, b: VarId, out: VarId },
    Mul { a: VarId, b: VarId, out: VarId },
    Scale { x: VarId, c: f64, out: VarId },
    /// out[i,j] = x[i,j] + bias[j]
    AddRowBroadcast { x: VarId, bias: VarId, out: VarId, rows: usize, cols: usize },
    SliceCols { x: VarId, out: VarId, rows: usize, cols: usize, start: usize, width: usize },
    ConcatCols { parts: Vec<VarId>, widths: Vec<usize>, out: VarId, rows: usize },
    ConcatRows { parts: Vec<VarId>, row_counts: Vec<usize>, out: VarId, cols: usize },
    SliceRows { x: VarId, out: VarId, cols: usize, start: usize, count: usize },
    GatherRows { table: VarId, indices: Vec<usize>, out: VarId, cols: usize },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, out: VarId, rows: usize, cols: usize },
    Gelu { x: VarId, out: VarId },
    Softmax { x: VarId, out: VarId, rows: usize, cols: usize },
    /// Row-wise softmax of `logits` with a multiplicative keep-mask over
    /// columns: w_j = exp(z_j - max) * m_j / sum. Gradients flow to both the
    /// logits and the mask, staying finite even where the mask is exactly 0.
    MaskedSoftmax { logits: VarId, mask: VarId, out: VarId, rows: usize, cols: usize },
    /// Scalar mean over rows of -ln softmax(logits)[target].
    CrossEntropyMean { logits: VarId, targets: Vec<usize>, out: VarId, cols: usize },
    SumAll { x: VarId, out: VarId },
    Dot { a: VarId, b: VarId, out: VarId },
    Ln { x: VarId, out: VarId },
    ClampMin { x: VarId, min: f64, out: VarId },
    /// Forward carries caller-supplied hard values; backward passes the
    /// upstream gradient to `soft` unchanged.
    StraightThrough { soft: VarId, out: VarId },
}

pub struct GradTape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> VarId {
        let id = VarId(self.bufs.len());
        self.bufs.push(Buf { data, shape, requires_grad });
        self.grads.push(None);
        id
    }

    /// Leaf with no gradient. Frozen weights and raw inputs go here.
    pub fn constant(&mut self, data: &[f64], shape: &[usize]) -> VarId {
        self.push(data.to_vec(), shape.to_vec(), false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> VarId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false)
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, data: &[f64], shape: &[usize]) -> VarId {
        self.push(data.to_vec(), shape.to_vec(), true)
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.bufs[id.0].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn len_of(&self, id: VarId) -> usize {
        self.bufs[id.0].data.len()
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.bufs[id.0].data.len(), 1);
        self.bufs[id.0].data[0]
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.bufs[id.0].requires_grad
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn any_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|i| self.bufs[i.0].requires_grad)
    }

    fn check_len(&self, id: VarId, want: usize, what: &str) -> Result<()> {
        let got = self.bufs[id.0].data.len();
        if got != want {
            return Err(Error::Shape(format!("{what}: expected {want} elements, got {got}")));
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId, m: usize, k: usize, n: usize) -> Result<VarId> {
        self.check_len(a, m * k, "matmul lhs")?;
        self.check_len(b, k * n, "matmul rhs")?;
        let mut data = vec![0.0; m * n];
        matmul_kernel(&self.bufs[a.0].data, &self.bufs[b.0].data, &mut data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        let out = self.push(data, vec![m, n], rg);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn matmul_tb(&mut self, a: VarId, b: VarId, m: usize, k: usize, n: usize) -> Result<VarId> {
        self.check_len(a, m * k, "matmul_tb lhs")?;
        self.check_len(b, n * k, "matmul_tb rhs")?;
        let mut data = vec![0.0; m * n];
        matmul_tb_kernel(&self.bufs[a.0].data, &self.bufs[b.0].data, &mut data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        let out = self.push(data, vec![m, n], rg);
        self.ops.push(Op::MatmulTransposeB { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_len(b, self.len_of(a), "add")?;
        let data: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_len(b, self.len_of(a), "sub")?;
        let data: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_len(b, self.len_of(a), "mul")?;
        let data: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.bufs[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.bufs[x.0].shape.clone();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    pub fn add_row_broadcast(&mut self, x: VarId, bias: VarId, rows: usize, cols: usize) -> Result<VarId> {
        self.check_len(x, rows * cols, "add_row_broadcast input")?;
        self.check_len(bias, cols, "add_row_broadcast bias")?;
        let mut data = self.bufs[x.0].data.clone();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += self.bufs[bias.0].data[j];
            }
        }
        let rg = self.any_grad(&[x, bias]);
        let out = self.push(data, vec![rows, cols], rg);
        self.ops.push(Op::AddRowBroadcast { x, bias, out, rows, cols });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: VarId, rows: usize, cols: usize, start: usize, width: usize) -> Result<VarId> {
        self.check_len(x, rows * cols, "slice_cols input")?;
        if start + width > cols {
            return Err(Error::Shape(format!("slice_cols {start}+{width} > {cols}")));
        }
        let src = &self.bufs[x.0].data;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + width]);
        }
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, vec![rows, width], rg);
        self.ops.push(Op::SliceCols { x, out, rows, cols, start, width });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[VarId], rows: usize) -> Result<VarId> {
        let widths: Vec<usize> = parts.iter().map(|p| self.len_of(*p) / rows).collect();
        for (p, w) in parts.iter().zip(widths.iter()) {
            self.check_len(*p, rows * w, "concat_cols part")?;
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, w) in parts.iter().zip(widths.iter()) {
                data.extend_from_slice(&self.bufs[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        let out = self.push(data, vec![rows, total], rg);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), widths, out, rows });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[VarId], cols: usize) -> Result<VarId> {
        let row_counts: Vec<usize> = parts.iter().map(|p| self.len_of(*p) / cols).collect();
        for (p, r) in parts.iter().zip(row_counts.iter()) {
            self.check_len(*p, r * cols, "concat_rows part")?;
        }
        let total: usize = row_counts.iter().sum();
        let mut data = Vec::with_capacity(total * cols);
        for p in parts {
            data.extend_from_slice(&self.bufs[p.0].data);
        }
        let rg = self.any_grad(parts);
        let out = self.push(data, vec![total, cols], rg);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), row_counts, out, cols });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: VarId, cols: usize, start: usize, count: usize) -> Result<VarId> {
        let rows = self.len_of(x) / cols;
        self.check_len(x, rows * cols, "slice_rows input")?;
        if start + count > rows {
            return Err(Error::Shape(format!("slice_rows {start}+{count} > {rows}")));
        }
        let data = self.bufs[x.0].data[start * cols..(start + count) * cols].to_vec();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, vec![count, cols], rg);
        self.ops.push(Op::SliceRows { x, out, cols, start, count });
        Ok(out)
    }

    pub fn gather_rows(&mut self, table: VarId, indices: &[usize], cols: usize) -> Result<VarId> {
        let table_rows = self.len_of(table) / cols;
        for &ix in indices {
            if ix >= table_rows {
                return Err(Error::Shape(format!("gather_rows index {ix} >= {table_rows}")));
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            data.extend_from_slice(&self.bufs[table.0].data[ix * cols..(ix + 1) * cols]);
        }
        let rg = self.bufs[table.0].requires_grad;
        let out = self.push(data, vec![indices.len(), cols], rg);
        self.ops.push(Op::GatherRows { table, indices: indices.to_vec(), out, cols });
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, rows: usize, cols: usize) -> Result<VarId> {
        self.check_len(x, rows * cols, "layer_norm input")?;
        self.check_len(gain, cols, "layer_norm gain")?;
        self.check_len(bias, cols, "layer_norm bias")?;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &self.bufs[x.0].data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv;
                data[i * cols + j] = xhat * self.bufs[gain.0].data[j] + self.bufs[bias.0].data[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        let out = self.push(data, vec![rows, cols], rg);
        self.ops.push(Op::LayerNorm { x, gain, bias, out, rows, cols });
        Ok(out)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.bufs[x.0].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.bufs[x.0].shape.clone();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Gelu { x, out });
        out
    }

    /// Row softmax; −∞ logits are masked entries and map to exactly 0.
    pub fn softmax_rows(&mut self, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
        self.check_len(x, rows * cols, "softmax input")?;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &self.bufs[x.0].data[i * cols..(i + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedSlice);
            }
            let orow = &mut data[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for j in 0..cols {
                let e = if row[j] == f64::NEG_INFINITY { 0.0 } else { (row[j] - max).exp() };
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, vec![rows, cols], rg);
        self.ops.push(Op::Softmax { x, out, rows, cols });
        Ok(out)
    }

    /// Softmax of each row of `logits` under a shared multiplicative
    /// keep-mask over columns. Equals ordinary softmax with masked logits at
    /// −∞ when the mask is binary, and is differentiable in the mask.
    pub fn masked_softmax_rows(&mut self, logits: VarId, mask: VarId, rows: usize, cols: usize) -> Result<VarId> {
        self.check_len(logits, rows * cols, "masked_softmax logits")?;
        self.check_len(mask, cols, "masked_softmax mask")?;
        let mut data = vec![0.0; rows * cols];
        {
            let m = &self.bufs[mask.0].data;
            for i in 0..rows {
                let row = &self.bufs[logits.0].data[i * cols..(i + 1) * cols];
                let mut max = f64::NEG_INFINITY;
                for j in 0..cols {
                    if m[j] > 0.0 && row[j] > max {
                        max = row[j];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::QueryFullyMasked);
                }
                let orow = &mut data[i * cols..(i + 1) * cols];
                let mut sum = 0.0;
                for j in 0..cols {
                    let t = (row[j] - max).exp() * m[j];
                    orow[j] = t;
                    sum += t;
                }
                if sum <= 0.0 {
                    return Err(Error::QueryFullyMasked);
                }
                for v in orow.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let rg = self.any_grad(&[logits, mask]);
        let out = self.push(data, vec![rows, cols], rg);
        self.ops.push(Op::MaskedSoftmax { logits, mask, out, rows, cols });
        Ok(out)
    }

    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: &[usize], cols: usize) -> Result<VarId> {
        let rows = targets.len();
        self.check_len(logits, rows * cols, "cross_entropy logits")?;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Shape(format!("target {t} >= vocab {cols}")));
            }
            let row = &self.bufs[logits.0].data[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.bufs[logits.0].requires_grad;
        let out = self.push(vec![total / rows as f64], vec![], rg);
        self.ops.push(Op::CrossEntropyMean { logits, targets: targets.to_vec(), out, cols });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(vec![s], vec![], rg);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_len(b, self.len_of(a), "dot")?;
        let s: f64 = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(vec![s], vec![], rg);
        self.ops.push(Op::Dot { a, b, out });
        Ok(out)
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        for &v in &self.bufs[x.0].data {
            if v <= 0.0 {
                return Err(Error::NonFinite("ln of non-positive value".into()));
            }
        }
        let data: Vec<f64> = self.bufs[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.bufs[x.0].shape.clone();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, shape, rg);
        self.ops.push(Op::Ln { x, out });
        Ok(out)
    }

    pub fn clamp_min(&mut self, x: VarId, min: f64) -> VarId {
        let data: Vec<f64> = self.bufs[x.0].data.iter().map(|v| v.max(min)).collect();
        let shape = self.bufs[x.0].shape.clone();
        let rg = self.bufs[x.0].requires_grad;
        let out = self.push(data, shape, rg);
        self.ops.push(Op::ClampMin { x, min, out });
        out
    }

    /// Straight-through: forward takes `hard_values`, backward routes the
    /// gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: VarId, hard_values: &[f64]) -> Result<VarId> {
        self.check_len(soft, hard_values.len(), "straight_through")?;
        let shape = self.bufs[soft.0].shape.clone();
        let rg = self.bufs[soft.0].requires_grad;
        let out = self.push(hard_values.to_vec(), shape, rg);
        self.ops.push(Op::StraightThrough { soft, out });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accum(&mut self, id: VarId, delta: &[f64]) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn grad_of(&self, id: VarId) -> Option<Vec<f64>> {
        self.grads[id.0].clone()
    }

    /// Reverse sweep seeding d(loss)/d(loss) = 1. The loss must be scalar.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.bufs[loss.0].data.len() != 1 {
            return Err(Error::Shape("backward expects a scalar loss".into()));
        }
        if !self.bufs[loss.0].data[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are immutable once recorded; take a raw copy of the variant
        // fields we need to avoid borrow conflicts.
        match &self.ops[idx] {
            Op::Matmul { a, b, out, m, k, n } => {
                let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_tb_kernel(&g, &self.bufs[b.0].data, &mut da, m, n, k);
                    self.accum(a, &da);
                }
                if self.bufs[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_ta_accum(&self.bufs[a.0].data, &g, &mut db, m, k, n);
                    self.accum(b, &db);
                }
            }
            Op::MatmulTransposeB { a, b, out, m, k, n } => {
                let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[a.0].requires_grad {
                    // dA[m,k] = G[m,n] @ B[n,k]
                    let mut da = vec![0.0; m * k];
                    matmul_kernel(&g, &self.bufs[b.0].data, &mut da, m, n, k);
                    self.accum(a, &da);
                }
                if self.bufs[b.0].requires_grad {
                    // dB[n,k] = G^T[n,m] @ A[m,k]
                    let mut db = vec![0.0; n * k];
                    let a_data = &self.bufs[a.0].data;
                    for i in 0..m {
                        for j in 0..n {
                            let c = g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            let arow = &a_data[i * k..(i + 1) * k];
                            let brow = &mut db[j * k..(j + 1) * k];
                            for kk in 0..k {
                                brow[kk] += c * arow[kk];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[a.0].requires_grad {
                    self.accum(a, &g);
                }
                if self.bufs[b.0].requires_grad {
                    self.accum(b, &g);
                }
            }
            Op::Sub { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[a.0].requires_grad {
                    self.accum(a, &g);
                }
                if self.bufs[b.0].requires_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[a.0].requires_grad {
                    let da: Vec<f64> =
                        g.iter().zip(self.bufs[b.0].data.iter()).map(|(gi, bv)| gi * bv).collect();
                    self.accum(a, &da);
                }
                if self.bufs[b.0].requires_grad {
                    let db: Vec<f64> =
                        g.iter().zip(self.bufs[a.0].data.iter()).map(|(gi, av)| gi * av).collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accum(x, &dx);
                }
            }
            Op::AddRowBroadcast { x, bias, out, rows, cols } => {
                let (x, bias, out, rows, cols) = (*x, *bias, *out, *rows, *cols);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    self.accum(x, &g);
                }
                if self.bufs[bias.0].requires_grad {
                    let mut db = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += g[i * cols + j];
                        }
                    }
                    self.accum(bias, &db);
                }
            }
            Op::SliceCols { x, out, rows, cols, start, width } => {
                let (x, out, rows, cols, start, width) = (*x, *out, *rows, *cols, *start, *width);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..width {
                            dx[i * cols + start + j] = g[i * width + j];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::ConcatCols { parts, widths, out, rows } => {
                let parts = parts.clone();
                let widths = widths.clone();
                let (out, rows) = (*out, *rows);
                let Some(g) = self.grad_of(out) else { return };
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, w) in parts.iter().zip(widths.iter()) {
                    if self.bufs[p.0].requires_grad {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accum(*p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts, row_counts, out, cols } => {
                let parts = parts.clone();
                let row_counts = row_counts.clone();
                let (out, cols) = (*out, *cols);
                let Some(g) = self.grad_of(out) else { return };
                let mut offset = 0;
                for (p, r) in parts.iter().zip(row_counts.iter()) {
                    if self.bufs[p.0].requires_grad {
                        let dp = g[offset * cols..(offset + r) * cols].to_vec();
                        self.accum(*p, &dp);
                    }
                    offset += r;
                }
            }
            Op::SliceRows { x, out, cols, start, count } => {
                let (x, out, cols, start, count) = (*x, *out, *cols, *start, *count);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let mut dx = vec![0.0; self.bufs[x.0].data.len()];
                    dx[start * cols..(start + count) * cols].copy_from_slice(&g);
                    self.accum(x, &dx);
                }
            }
            Op::GatherRows { table, indices, out, cols } => {
                let indices = indices.clone();
                let (table, out, cols) = (*table, *out, *cols);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[table.0].requires_grad {
                    let mut dt = vec![0.0; self.bufs[table.0].data.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dt[ix * cols + j] += g[r * cols + j];
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            Op::LayerNorm { x, gain, bias, out, rows, cols } => {
                let (x, gain, bias, out, rows, cols) = (*x, *gain, *bias, *out, *rows, *cols);
                let Some(g) = self.grad_of(out) else { return };
                let nf = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for i in 0..rows {
                    let row = &self.bufs[x.0].data[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xhat = 0.0;
                    let mut xhat = vec![0.0; cols];
                    let mut dh = vec![0.0; cols];
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * inv;
                        dh[j] = grow[j] * self.bufs[gain.0].data[j];
                        sum_dh += dh[j];
                        sum_dh_xhat += dh[j] * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    for j in 0..cols {
                        dx[i * cols + j] = inv * (dh[j] - sum_dh / nf - xhat[j] * sum_dh_xhat / nf);
                    }
                }
                if self.bufs[x.0].requires_grad {
                    self.accum(x, &dx);
                }
                if self.bufs[gain.0].requires_grad {
                    self.accum(gain, &dgain);
                }
                if self.bufs[bias.0].requires_grad {
                    self.accum(bias, &dbias);
                }
            }
            Op::Gelu { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.bufs[x.0].data.iter())
                        .map(|(gi, &xv)| gi * gelu_grad_scalar(xv))
                        .collect();
                    self.accum(x, &dx);
                }
            }
            Op::Softmax { x, out, rows, cols } => {
                let (x, out, rows, cols) = (*x, *out, *rows, *cols);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let w = &self.bufs[out.0].data[i * cols..(i + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += grow[j] * w[j];
                        }
                        for j in 0..cols {
                            dx[i * cols + j] = w[j] * (grow[j] - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::MaskedSoftmax { logits, mask, out, rows, cols } => {
                let (logits, mask, out, rows, cols) = (*logits, *mask, *out, *rows, *cols);
                let Some(g) = self.grad_of(out) else { return };
                let need_dz = self.bufs[logits.0].requires_grad;
                let need_dm = self.bufs[mask.0].requires_grad;
                if !need_dz && !need_dm {
                    return;
                }
                let mut dz = vec![0.0; rows * cols];
                let mut dm = vec![0.0; cols];
                for i in 0..rows {
                    let zrow = &self.bufs[logits.0].data[i * cols..(i + 1) * cols];
                    let m = &self.bufs[mask.0].data;
                    let w = &self.bufs[out.0].data[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..cols {
                        if m[j] > 0.0 && zrow[j] > max {
                            max = zrow[j];
                        }
                    }
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += (zrow[j] - max).exp() * m[j];
                    }
                    let mut gbar = 0.0;
                    for j in 0..cols {
                        gbar += grow[j] * w[j];
                    }
                    for j in 0..cols {
                        if need_dz {
                            dz[i * cols + j] = w[j] * (grow[j] - gbar);
                        }
                        if need_dm {
                            dm[j] += (zrow[j] - max).exp() / s * (grow[j] - gbar);
                        }
                    }
                }
                if need_dz {
                    self.accum(logits, &dz);
                }
                if need_dm {
                    self.accum(mask, &dm);
                }
            }
            Op::CrossEntropyMean { logits, targets, out, cols } => {
                let targets = targets.clone();
                let (logits, out, cols) = (*logits, *out, *cols);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[logits.0].requires_grad {
                    let scale = g[0] / targets.len() as f64;
                    let mut dl = vec![0.0; targets.len() * cols];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &self.bufs[logits.0].data[i * cols..(i + 1) * cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for j in 0..cols {
                            let e = (row[j] - max).exp();
                            dl[i * cols + j] = e;
                            sum += e;
                        }
                        for j in 0..cols {
                            dl[i * cols + j] /= sum;
                        }
                        dl[i * cols + t] -= 1.0;
                        for j in 0..cols {
                            dl[i * cols + j] *= scale;
                        }
                    }
                    self.accum(logits, &dl);
                }
            }
            Op::SumAll { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let dx = vec![g[0]; self.bufs[x.0].data.len()];
                    self.accum(x, &dx);
                }
            }
            Op::Dot { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.grad_of(out) else { return };
                let c = g[0];
                if self.bufs[a.0].requires_grad {
                    let da: Vec<f64> = self.bufs[b.0].data.iter().map(|v| c * v).collect();
                    self.accum(a, &da);
                }
                if self.bufs[b.0].requires_grad {
                    let db: Vec<f64> = self.bufs[a.0].data.iter().map(|v| c * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::Ln { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.bufs[x.0].data.iter())
                        .map(|(gi, xv)| gi / xv)
                        .collect();
                    self.accum(x, &dx);
                }
            }
            Op::ClampMin { x, min, out } => {
                let (x, min, out) = (*x, *min, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[x.0].requires_grad {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.bufs[x.0].data.iter())
                        .map(|(gi, &xv)| if xv > min { *gi } else { 0.0 })
                        .collect();
                    self.accum(x, &dx);
                }
            }
            Op::StraightThrough { soft, out } => {
                let (soft, out) = (*soft, *out);
                let Some(g) = self.grad_of(out) else { return };
                if self.bufs[soft.0].requires_grad {
                    self.accum(soft, &g);
                }
            }
        }
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient for a leaf; zeros when nothing flowed to it.
    pub fn grad_or_zeros(&self, id: VarId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[id.0].data.len()],
        }
    }
}
