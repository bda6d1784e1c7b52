//! Small row-major f32 kernels shared by the inference and training paths.

/// `out = W x` with `W: [out_dim x in_dim]` row-major.
pub fn matvec(w: &[f32], x: &[f32], out_dim: usize, in_dim: usize, out: &mut [f32]) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0f32;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        out[o] = acc;
    }
}

/// RMS-normalize `x` in place against gain `g`; returns the reciprocal RMS
/// (needed by the backward pass).
pub fn rmsnorm(x: &mut [f32], g: &[f32]) -> f32 {
    let n = x.len() as f32;
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / n;
    let ri = (ms + 1e-5).sqrt().recip();
    for (xi, gi) in x.iter_mut().zip(g) {
        *xi = *xi * ri * gi;
    }
    ri
}

pub fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

/// d silu(z) / dz.
pub fn silu_grad(z: f32) -> f32 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Apply rotary embedding in place to one `[n_heads * head_dim]` row at
/// absolute position `pos` (1-based). Pairs `(2i, 2i+1)` within each head are
/// rotated by `pos / 10000^(2i/head_dim)`.
pub fn rotate(row: &mut [f32], pos: usize, n_heads: usize, head_dim: usize) {
    let p = pos as f32;
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..head_dim / 2 {
            let theta = p * (10000.0f32).powf(-2.0 * i as f32 / head_dim as f32);
            let (sin, cos) = theta.sin_cos();
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos - b * sin;
            row[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Inverse rotation; used to back-propagate through `rotate`.
pub fn rotate_inverse(row: &mut [f32], pos: usize, n_heads: usize, head_dim: usize) {
    let p = pos as f32;
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..head_dim / 2 {
            let theta = p * (10000.0f32).powf(-2.0 * i as f32 / head_dim as f32);
            let (sin, cos) = theta.sin_cos();
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos + b * sin;
            row[base + 2 * i + 1] = -a * sin + b * cos;
        }
    }
}

/// Index of the largest element, first occurrence on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax value at index `target`, accumulated in f64.
pub fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
    (row[target] as f64) - max - sum.ln()
}
