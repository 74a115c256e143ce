//! Shared f64 kernels used by both the tape and the plain forward path.

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

/// out[m,n] += A[m,k] @ B[k,n]
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] = A[m,k] @ B[n,k]^T
pub(crate) fn matmul_tb_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
}

/// out[k,n] += A[m,k]^T @ G[m,n]
pub(crate) fn matmul_ta_accum(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place layer norm of each row: y = (x - mean) / sqrt(var + eps) * g + b.
pub(crate) fn layer_norm_rows(x: &mut [f64], gain: &[f64], bias: &[f64], rows: usize, cols: usize) {
    let nf = cols as f64;
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / nf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..cols {
            row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
}

/// Softmax of one row under a multiplicative keep-mask: w_j ∝ exp(z_j - max) * m_j.
/// The max is taken over kept entries only; zero-mask entries come out exactly 0,
/// so the result is bit-identical to physically deleting those keys.
/// Returns false when every entry is masked.
pub(crate) fn masked_softmax_row(z: &mut [f64], mask: &[f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &m) in mask.iter().enumerate() {
        if m > 0.0 && z[j] > max {
            max = z[j];
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, &m) in mask.iter().enumerate() {
        let t = (z[j] - max).exp() * m;
        z[j] = t;
        sum += t;
    }
    if sum <= 0.0 {
        return false;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    true
}
