//! Compute kernels shared by the forward ops and their backward rules.
//!
//! Every kernel computes each output element with the same scalar recipe
//! whether it runs sequentially or fans out over rayon, so results are
//! bit-identical across thread counts and with the `parallel` feature off.
//! Cross-element reductions (sum, mean, gradient folds) stay sequential.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

/// Work (in output elements or MACs) below which threading overhead wins.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 14;

#[cfg(feature = "parallel")]
static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch for the rayon code paths. No-op when the `parallel`
/// feature is compiled out. Mainly for benchmarking the two paths against
/// each other.
pub fn set_parallel_enabled(on: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL_ENABLED.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// Whether the rayon paths are compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL_ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

#[cfg(feature = "parallel")]
#[inline]
fn should_par(work: usize) -> bool {
    work >= PAR_MIN_WORK && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

// ── Elementwise maps ─────────────────────────────────────────────────────

pub(crate) fn unary_map(x: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if should_par(x.len()) {
        return x.par_iter().map(|&v| f(v)).collect();
    }
    x.iter().map(|&v| f(v)).collect()
}

/// Binary map where `b` tiles cyclically under `a` (trailing dims equal,
/// missing leading dims broadcast). Callers guarantee `a.len() % b.len() == 0`.
pub(crate) fn binary_map_cyclic(
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64 + Sync + Send,
) -> Vec<f64> {
    let bn = b.len();
    #[cfg(feature = "parallel")]
    if should_par(a.len()) {
        return a
            .par_iter()
            .enumerate()
            .map(|(i, &av)| f(av, b[i % bn]))
            .collect();
    }
    a.iter()
        .enumerate()
        .map(|(i, &av)| f(av, b[i % bn]))
        .collect()
}

/// Fold `src` (length = k * dst_len) back onto the smaller cyclic operand by
/// summing tiles. Sequential: accumulation order must not depend on threads.
pub(crate) fn fold_cyclic(src: &[f64], dst_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; dst_len];
    for (i, &v) in src.iter().enumerate() {
        out[i % dst_len] += v;
    }
    out
}

// ── GELU (tanh form) ─────────────────────────────────────────────────────

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

// ── Batched matmul ───────────────────────────────────────────────────────

/// Strides (in elements) of each batch dim, 0 where the dim is broadcast.
pub(crate) fn batch_strides(batch_dims: &[usize], own_batch: &[usize], mat_elems: usize) -> Vec<usize> {
    let pad = batch_dims.len() - own_batch.len();
    // Physical strides of own_batch, rightmost dim moves by mat_elems.
    let mut phys = vec![0usize; own_batch.len()];
    let mut acc = mat_elems;
    for i in (0..own_batch.len()).rev() {
        phys[i] = acc;
        acc *= own_batch[i];
    }
    let mut strides = vec![0usize; batch_dims.len()];
    for i in 0..batch_dims.len() {
        if i < pad {
            strides[i] = 0;
        } else {
            let own = own_batch[i - pad];
            strides[i] = if own == 1 { 0 } else { phys[i - pad] };
        }
    }
    strides
}

/// out[..., m, n] = a[..., m, k] @ b[..., k, n] with leading dims broadcast.
/// `a_strides` / `b_strides` index the flattened batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    b: &[f64],
    batch_dims: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let batch: usize = batch_dims.iter().product();
    let mut out = vec![0.0; batch * m * n];

    let row_task = |row: usize, out_row: &mut [f64]| {
        let bi = row / m;
        let i = row % m;
        // Decompose bi into batch coords, dot with strides.
        let mut a_off = 0;
        let mut b_off = 0;
        let mut rem = bi;
        for d in (0..batch_dims.len()).rev() {
            let c = rem % batch_dims[d];
            rem /= batch_dims[d];
            a_off += c * a_strides[d];
            b_off += c * b_strides[d];
        }
        let a_row = &a[a_off + i * k..a_off + (i + 1) * k];
        let b_mat = &b[b_off..b_off + k * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    };

    #[cfg(feature = "parallel")]
    if should_par(batch * m * n * k) {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, chunk)| row_task(row, chunk));
        return out;
    }
    for (row, chunk) in out.chunks_mut(n).enumerate() {
        row_task(row, chunk);
    }
    out
}

// ── Softmax along an axis ────────────────────────────────────────────────

/// Stable softmax over `lane` entries spaced `inner` apart; `outer` x `inner`
/// independent lanes.
pub(crate) fn softmax(x: &[f64], outer: usize, lane: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let lane_task = |lid: usize, out: &mut [f64]| {
        let o = lid / inner;
        let i = lid % inner;
        let base = o * lane * inner + i;
        let mut max = f64::NEG_INFINITY;
        for l in 0..lane {
            max = max.max(x[base + l * inner]);
        }
        let mut sum = 0.0;
        for l in 0..lane {
            let e = (x[base + l * inner] - max).exp();
            out[l] = e;
            sum += e;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    };

    let lanes = outer * inner;
    #[cfg(feature = "parallel")]
    if should_par(x.len()) && inner == 1 {
        out.par_chunks_mut(lane)
            .enumerate()
            .for_each(|(lid, chunk)| lane_task(lid, chunk));
        return out;
    }
    if inner == 1 {
        for (lid, chunk) in out.chunks_mut(lane).enumerate() {
            lane_task(lid, chunk);
        }
    } else {
        // Strided lanes: gather, compute, scatter.
        let mut buf = vec![0.0; lane];
        for lid in 0..lanes {
            lane_task(lid, &mut buf);
            let o = lid / inner;
            let i = lid % inner;
            let base = o * lane * inner + i;
            for l in 0..lane {
                out[base + l * inner] = buf[l];
            }
        }
    }
    out
}

/// Backward of softmax: dx = y * (dy - sum(dy * y)) per lane.
pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    lane: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = 0.0;
            for l in 0..lane {
                let idx = base + l * inner;
                dot += dy[idx] * y[idx];
            }
            for l in 0..lane {
                let idx = base + l * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

// ── Layer norm over the last axis ────────────────────────────────────────

/// Returns (y, per-row mean, per-row 1/sqrt(var+eps)). Population variance.
pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    width: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];

    let row_task = |r: usize, y_row: &mut [f64]| -> (f64, f64) {
        let x_row = &x[r * width..(r + 1) * width];
        let mean = x_row.iter().sum::<f64>() / width as f64;
        let var = x_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for d in 0..width {
            y_row[d] = (x_row[d] - mean) * inv_std * gamma[d] + beta[d];
        }
        (mean, inv_std)
    };

    #[cfg(feature = "parallel")]
    if should_par(x.len()) {
        let stats: Vec<(f64, f64)> = y
            .par_chunks_mut(width)
            .enumerate()
            .map(|(r, chunk)| row_task(r, chunk))
            .collect();
        for (r, (m, s)) in stats.into_iter().enumerate() {
            means[r] = m;
            inv_stds[r] = s;
        }
        return (y, means, inv_stds);
    }
    for (r, chunk) in y.chunks_mut(width).enumerate() {
        let (m, s) = row_task(r, chunk);
        means[r] = m;
        inv_stds[r] = s;
    }
    (y, means, inv_stds)
}

/// Backward of layer norm. Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    means: &[f64],
    inv_stds: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; width];
    let mut dbeta = vec![0.0; width];
    for r in 0..rows {
        let base = r * width;
        let s = inv_stds[r];
        let mu = means[r];
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for d in 0..width {
            let xhat = (x[base + d] - mu) * s;
            let g = dy[base + d] * gamma[d];
            g_mean += g;
            gx_mean += g * xhat;
            dgamma[d] += dy[base + d] * xhat;
            dbeta[d] += dy[base + d];
        }
        g_mean /= width as f64;
        gx_mean /= width as f64;
        for d in 0..width {
            let xhat = (x[base + d] - mu) * s;
            let g = dy[base + d] * gamma[d];
            dx[base + d] = s * (g - g_mean - xhat * gx_mean);
        }
    }
    (dx, dgamma, dbeta)
}

// ── Axis permutation ─────────────────────────────────────────────────────

pub(crate) fn permute(x: &[f64], shape: &[usize], order: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    // in_strides over the input layout
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let n = x.len();
    let mut out = vec![0.0; n];
    let fill = |start: usize, chunk: &mut [f64]| {
        for (off, slot) in chunk.iter_mut().enumerate() {
            let mut rem = start + off;
            let mut src = 0;
            for d in (0..rank).rev() {
                let c = rem % out_shape[d];
                rem /= out_shape[d];
                src += c * in_strides[order[d]];
            }
            *slot = x[src];
        }
    };
    #[cfg(feature = "parallel")]
    if should_par(n) {
        const CHUNK: usize = 4096;
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| fill(ci * CHUNK, chunk));
        return out;
    }
    fill(0, &mut out);
    out
}

pub(crate) fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}
