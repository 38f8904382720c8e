//! Dense numeric kernels shared by the tape and the no-grad evaluation path.
//!
//! Every kernel has a sequential and a data-parallel implementation selected
//! by an explicit flag; the crate-level default follows the `parallel`
//! feature. Both paths compute each output element with the same inner-loop
//! order, so results are bit-identical regardless of thread count. The
//! `bench`-facing `*_into` entry points take the flag so the criterion suite
//! can compare both on one build.

use crate::scalar::Scalar;

/// Whether kernels run data-parallel by default on this build.
pub const DEFAULT_PARALLEL: bool = cfg!(feature = "parallel");

/// Below this many output rows the rayon dispatch overhead dominates.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 32;

/// Fixed chunk length for deterministic reductions.
const SUM_CHUNK: usize = 4096;

#[cfg(feature = "parallel")]
fn for_each_row<T, F>(parallel: bool, out: &mut [T], row_len: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    let rows = out.len().checked_div(row_len).unwrap_or(0);
    if parallel && rows >= PAR_MIN_ROWS {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn for_each_row<T, F>(_parallel: bool, out: &mut [T], row_len: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

// ── element-wise ─────────────────────────────────────────────────────

pub fn add_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j] + b[base + j];
        }
    });
}

pub fn sub_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j] - b[base + j];
        }
    });
}

pub fn mul_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j] * b[base + j];
        }
    });
}

pub fn scale_into<T: Scalar>(parallel: bool, a: &[T], c: T, out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j] * c;
        }
    });
}

pub fn exp_into<T: Scalar>(parallel: bool, a: &[T], out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j].exp();
        }
    });
}

pub fn ln_into<T: Scalar>(parallel: bool, a: &[T], out: &mut [T]) {
    for_each_row(parallel, out, 1024.min(a.len().max(1)), |i, row| {
        let base = i * 1024.min(a.len().max(1));
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[base + j].ln();
        }
    });
}

/// Deterministic chunked sum: chunk partials are always combined in chunk
/// order, so the result does not depend on the number of worker threads.
pub fn sum_all<T: Scalar>(parallel: bool, a: &[T]) -> T {
    let n_chunks = a.len().div_ceil(SUM_CHUNK).max(1);
    let mut partials = vec![T::ZERO; n_chunks];
    for_each_row(parallel, &mut partials, 1, |i, slot| {
        let lo = i * SUM_CHUNK;
        let hi = (lo + SUM_CHUNK).min(a.len());
        let mut acc = T::ZERO;
        for &v in &a[lo..hi] {
            acc += v;
        }
        slot[0] = acc;
    });
    let mut total = T::ZERO;
    for p in partials {
        total += p;
    }
    total
}

// ── matmul ───────────────────────────────────────────────────────────

/// c[m,n] = a[m,k] @ b[k,n]
pub fn mm_nn_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(parallel, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for o in row.iter_mut() {
            *o = T::ZERO;
        }
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, o) in row.iter_mut().enumerate() {
                *o += av * brow[j];
            }
        }
    });
}

/// c[m,n] = a[m,k] @ b[n,k]^T
pub fn mm_nt_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(parallel, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            *o = acc;
        }
    });
}

/// c[m,n] = a[k,m]^T @ b[k,n]
pub fn mm_tn_into<T: Scalar>(parallel: bool, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(parallel, out, n, |i, row| {
        for o in row.iter_mut() {
            *o = T::ZERO;
        }
        for kk in 0..k {
            let av = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, o) in row.iter_mut().enumerate() {
                *o += av * brow[j];
            }
        }
    });
}

// ── dilated 1-D convolution over time ────────────────────────────────

/// Geometry of one dilated temporal convolution.
///
/// Kernel taps sit at time offsets `{-h*d, ..., -d, 0, d, ..., h*d}`
/// (`2h+1` taps); the input is zero-padded by `h*d` frames on each side and
/// output frame `t` is centered on input frame `t*stride`, giving output
/// length `ceil(T/stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub half_context: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        2 * self.half_context + 1
    }

    pub fn t_out(&self) -> usize {
        self.t_in.div_ceil(self.stride)
    }
}

/// y[b, t, o] = bias[o] + sum_{tap, i} x[b, t*s + (tap-h)*d, i] * w[tap, i, o]
pub fn conv1d_forward_into<T: Scalar>(
    parallel: bool,
    x: &[T],
    w: &[T],
    bias: &[T],
    g: ConvGeom,
    out: &mut [T],
) {
    let (ci, co, h, d, s) = (g.c_in, g.c_out, g.half_context as isize, g.dilation as isize, g.stride);
    let t_out = g.t_out();
    debug_assert_eq!(out.len(), g.batch * t_out * co);
    for_each_row(parallel, out, co, |row_idx, row| {
        let b = row_idx / t_out;
        let t = row_idx % t_out;
        row.copy_from_slice(bias);
        let center = (t * s) as isize;
        for tap in 0..g.taps() {
            let src = center + (tap as isize - h) * d;
            if src < 0 || src >= g.t_in as isize {
                continue;
            }
            let xrow = &x[(b * g.t_in + src as usize) * ci..(b * g.t_in + src as usize + 1) * ci];
            let wtap = &w[tap * ci * co..(tap + 1) * ci * co];
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &wtap[i * co..(i + 1) * co];
                for (o, slot) in row.iter_mut().enumerate() {
                    *slot += xv * wrow[o];
                }
            }
        }
    });
}

pub fn conv1d_backward_x_into<T: Scalar>(parallel: bool, dy: &[T], w: &[T], g: ConvGeom, dx: &mut [T]) {
    let (ci, co, h, d, s) = (g.c_in, g.c_out, g.half_context as isize, g.dilation as isize, g.stride as isize);
    let t_out = g.t_out() as isize;
    debug_assert_eq!(dx.len(), g.batch * g.t_in * ci);
    for_each_row(parallel, dx, ci, |row_idx, row| {
        let b = row_idx / g.t_in;
        let ti = (row_idx % g.t_in) as isize;
        for v in row.iter_mut() {
            *v = T::ZERO;
        }
        for tap in 0..g.taps() {
            // ti = t*s + (tap-h)*d  =>  t = (ti - (tap-h)*d) / s
            let pos = ti - (tap as isize - h) * d;
            if pos < 0 || pos % s != 0 {
                continue;
            }
            let t = pos / s;
            if t >= t_out {
                continue;
            }
            let dyrow = &dy[(b * t_out as usize + t as usize) * co..(b * t_out as usize + t as usize + 1) * co];
            let wtap = &w[tap * ci * co..(tap + 1) * ci * co];
            for (i, slot) in row.iter_mut().enumerate() {
                let wrow = &wtap[i * co..(i + 1) * co];
                let mut acc = T::ZERO;
                for (o, &dv) in dyrow.iter().enumerate() {
                    acc += dv * wrow[o];
                }
                *slot += acc;
            }
        }
    });
}

pub fn conv1d_backward_w_into<T: Scalar>(parallel: bool, dy: &[T], x: &[T], g: ConvGeom, dw: &mut [T]) {
    let (ci, co, h, d, s) = (g.c_in, g.c_out, g.half_context as isize, g.dilation as isize, g.stride);
    let t_out = g.t_out();
    debug_assert_eq!(dw.len(), g.taps() * ci * co);
    // One row per (tap, input channel); batch/time accumulate in fixed order.
    for_each_row(parallel, dw, co, |row_idx, row| {
        let tap = row_idx / ci;
        let i = row_idx % ci;
        for v in row.iter_mut() {
            *v = T::ZERO;
        }
        for b in 0..g.batch {
            for t in 0..t_out {
                let src = (t * s) as isize + (tap as isize - h) * d;
                if src < 0 || src >= g.t_in as isize {
                    continue;
                }
                let xv = x[(b * g.t_in + src as usize) * ci + i];
                let dyrow = &dy[(b * t_out + t) * co..(b * t_out + t + 1) * co];
                for (o, slot) in row.iter_mut().enumerate() {
                    *slot += xv * dyrow[o];
                }
            }
        }
    });
}

pub fn conv1d_backward_bias_into<T: Scalar>(dy: &[T], co: usize, db: &mut [T]) {
    debug_assert_eq!(db.len(), co);
    for v in db.iter_mut() {
        *v = T::ZERO;
    }
    for row in dy.chunks(co) {
        for (o, &dv) in row.iter().enumerate() {
            db[o] += dv;
        }
    }
}

// ── row-wise normalizations ──────────────────────────────────────────

/// Layer norm over the last axis; returns per-row (mean, inv_std) for backward.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_forward_into<T: Scalar>(
    parallel: bool,
    x: &[T],
    gain: &[T],
    bias: &[T],
    width: usize,
    eps: T,
    out: &mut [T],
    stats: &mut [T], // [rows*2]: mean, inv_std interleaved
) {
    let rows = x.len() / width;
    debug_assert_eq!(stats.len(), rows * 2);
    let inv_n = T::ONE / T::from_f64(width as f64);
    // Compute stats first (rows of width 2), then normalized output.
    for_each_row(parallel, stats, 2, |r, st| {
        let xr = &x[r * width..(r + 1) * width];
        let mut mean = T::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        st[0] = mean;
        st[1] = T::ONE / (var + eps).sqrt();
    });
    for_each_row(parallel, out, width, |r, row| {
        let xr = &x[r * width..(r + 1) * width];
        let mean = stats[r * 2];
        let istd = stats[r * 2 + 1];
        for (j, o) in row.iter_mut().enumerate() {
            *o = (xr[j] - mean) * istd * gain[j] + bias[j];
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    parallel: bool,
    dy: &[T],
    x: &[T],
    gain: &[T],
    stats: &[T],
    width: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let rows = x.len() / width;
    let inv_n = T::ONE / T::from_f64(width as f64);
    for_each_row(parallel, dx, width, |r, row| {
        let xr = &x[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mean = stats[r * 2];
        let istd = stats[r * 2 + 1];
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for j in 0..width {
            let gy = dyr[j] * gain[j];
            let xh = (xr[j] - mean) * istd;
            sum_g += gy;
            sum_gx += gy * xh;
        }
        let m_g = sum_g * inv_n;
        let m_gx = sum_gx * inv_n;
        for (j, o) in row.iter_mut().enumerate() {
            let gy = dyr[j] * gain[j];
            let xh = (xr[j] - mean) * istd;
            *o = istd * (gy - m_g - xh * m_gx);
        }
    });
    // Column reductions: one task per feature, rows accumulated in order.
    for_each_row(parallel, dgain, 1, |j, slot| {
        let mut acc = T::ZERO;
        for r in 0..rows {
            let xh = (x[r * width + j] - stats[r * 2]) * stats[r * 2 + 1];
            acc += dy[r * width + j] * xh;
        }
        slot[0] = acc;
    });
    for_each_row(parallel, dbias, 1, |j, slot| {
        let mut acc = T::ZERO;
        for r in 0..rows {
            acc += dy[r * width + j];
        }
        slot[0] = acc;
    });
}

pub fn softmax_rows_into<T: Scalar>(parallel: bool, x: &[T], width: usize, out: &mut [T]) {
    for_each_row(parallel, out, width, |r, row| {
        let xr = &x[r * width..(r + 1) * width];
        let mut mx = xr[0];
        for &v in xr {
            mx = mx.max(v);
        }
        let mut z = T::ZERO;
        for (j, o) in row.iter_mut().enumerate() {
            *o = (xr[j] - mx).exp();
            z += *o;
        }
        let inv = T::ONE / z;
        for o in row.iter_mut() {
            *o *= inv;
        }

    });
}

/// dx = y .* (dy - sum(dy .* y)) per row
pub fn softmax_backward_into<T: Scalar>(parallel: bool, dy: &[T], y: &[T], width: usize, dx: &mut [T]) {
    for_each_row(parallel, dx, width, |r, row| {
        let yr = &y[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mut dot = T::ZERO;
        for j in 0..width {
            dot += dyr[j] * yr[j];
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = yr[j] * (dyr[j] - dot);
        }
    });
}

pub fn log_softmax_rows_into<T: Scalar>(parallel: bool, x: &[T], width: usize, out: &mut [T]) {
    for_each_row(parallel, out, width, |r, row| {
        let xr = &x[r * width..(r + 1) * width];
        let mut mx = xr[0];
        for &v in xr {
            mx = mx.max(v);
        }
        let mut z = T::ZERO;
        for &v in xr {
            z += (v - mx).exp();
        }
        let lse = mx + z.ln();
        for (j, o) in row.iter_mut().enumerate() {
            *o = xr[j] - lse;
        }
    });
}

/// dx = dy - exp(log_y) * sum(dy) per row
pub fn log_softmax_backward_into<T: Scalar>(parallel: bool, dy: &[T], log_y: &[T], width: usize, dx: &mut [T]) {
    for_each_row(parallel, dx, width, |r, row| {
        let lyr = &log_y[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mut s = T::ZERO;
        for &v in dyr {
            s += v;
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = dyr[j] - lyr[j].exp() * s;
        }
    });
}

/// log(exp(a) + exp(b)) without overflow; -inf identity handled.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
