//! Single-threaded numeric kernels shared by the autodiff graph and the
//! frozen-context inference path.
//!
//! Matrix products accumulate along the inner dimension in index order for
//! every output element, so results match a naive triple loop bit for bit.
//! The `ikj` layout keeps the inner loop contiguous in both the output row
//! and the right operand row, which is what the auto-vectorizer wants.

use crate::mathf;
use alloc::vec;
use alloc::vec::Vec;

/// `out[m,n] += a[m,k] * b[k,n]`
///
/// Rows are processed in pairs so each streamed row of `b` feeds two output
/// rows; per output element the inner-dimension accumulation order is still
/// plain `0..k`, identical to the naive triple loop.
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let pairs = m / 2;
    for p in 0..pairs {
        let i = p * 2;
        let (head, tail) = out.split_at_mut((i + 1) * n);
        let o0 = &mut head[i * n..];
        let o1 = &mut tail[..n];
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        for kk in 0..k {
            let (x0, x1) = (a0[kk], a1[kk]);
            let brow = &b[kk * n..(kk + 1) * n];
            for ((y0, y1), &bv) in o0.iter_mut().zip(o1.iter_mut()).zip(brow.iter()) {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
            }
        }
    }
    if m % 2 == 1 {
        let i = m - 1;
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T` — row-dot-row with four partial sums.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += dot(arow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulator lanes (fixed association
/// order, so results are identical on every build).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb.iter()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Softmax over `groups` strided slices of length `len`, writing into `out`.
///
/// A fully masked group (max of `-inf`) becomes all zeros instead of NaN.
pub fn softmax_strided(
    x: &[f32],
    out: &mut [f32],
    groups: usize,
    len: usize,
    base_stride: usize,
    elem_stride: usize,
) {
    for g in 0..groups {
        let base = g * base_stride;
        let mut max = f32::NEG_INFINITY;
        for e in 0..len {
            let v = x[base + e * elem_stride];
            if v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            for e in 0..len {
                out[base + e * elem_stride] = 0.0;
            }
            continue;
        }
        let mut sum = 0.0f32;
        for e in 0..len {
            let idx = base + e * elem_stride;
            // Masked entries are exactly -inf; skip the libm call.
            let v = if x[idx] == f32::NEG_INFINITY {
                0.0
            } else {
                mathf::expf(x[idx] - max)
            };
            out[idx] = v;
            sum += v;
        }
        let inv = 1.0 / sum;
        for e in 0..len {
            out[base + e * elem_stride] *= inv;
        }
    }
}

/// Log-softmax with the same strided layout as [`softmax_strided`].
pub fn log_softmax_strided(
    x: &[f32],
    out: &mut [f32],
    groups: usize,
    len: usize,
    base_stride: usize,
    elem_stride: usize,
) {
    for g in 0..groups {
        let base = g * base_stride;
        let mut max = f32::NEG_INFINITY;
        for e in 0..len {
            let v = x[base + e * elem_stride];
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for e in 0..len {
            sum += mathf::expf(x[base + e * elem_stride] - max);
        }
        let log_z = max + mathf::lnf(sum);
        for e in 0..len {
            let idx = base + e * elem_stride;
            out[idx] = x[idx] - log_z;
        }
    }
}

/// Row-wise layer norm with learnable gain and bias.
///
/// Writes `(mean, rstd)` per row into `aux` for the backward pass.
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    rows: usize,
    cols: usize,
    out: &mut [f32],
    aux: &mut Vec<f32>,
) {
    aux.clear();
    aux.reserve(rows * 2);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut mean = 0.0f32;
        for &v in xr {
            mean += v;
        }
        mean /= cols as f32;
        let mut var = 0.0f32;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= cols as f32;
        let rstd = 1.0 / mathf::sqrtf(var + eps);
        let orow = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            orow[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        aux.push(mean);
        aux.push(rstd);
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + mathf::tanhf(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = mathf::tanhf(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-pair rotation frequencies `base^(-2i/dim)` for a rotary head.
pub fn rope_thetas(head_dim: usize, base: f32) -> Vec<f64> {
    let half = head_dim / 2;
    let mut thetas = Vec::with_capacity(half);
    for i in 0..half {
        thetas.push(mathf::pow64(
            base as f64,
            -2.0 * i as f64 / head_dim as f64,
        ));
    }
    thetas
}

/// Precomputed `cos`/`sin` of every `(position, frequency)` pair.
///
/// One forward pass rotates queries and keys in every head of every layer
/// with the same position list; sharing the table keeps the f64 trig out of
/// the hot path.
#[derive(Debug)]
pub struct RopeTable {
    pub half: usize,
    pub positions: Vec<i64>,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(positions: &[i64], head_dim: usize, base: f32) -> Self {
        let thetas = rope_thetas(head_dim, base);
        let half = thetas.len();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for &theta in &thetas {
                let phase = pos as f64 * theta;
                cos.push(mathf::cos64(phase) as f32);
                sin.push(mathf::sin64(phase) as f32);
            }
        }
        Self {
            half,
            positions: positions.to_vec(),
            cos,
            sin,
        }
    }

    /// Rotate every row of `x` (shape `[rows, 2 * half]`) by its position.
    pub fn rotate_rows(&self, x: &[f32], inverse: bool, out: &mut [f32]) {
        let dim = self.half * 2;
        debug_assert_eq!(x.len(), self.positions.len() * dim);
        let sign = if inverse { -1.0f32 } else { 1.0f32 };
        for r in 0..self.positions.len() {
            let cs = &self.cos[r * self.half..(r + 1) * self.half];
            let sn = &self.sin[r * self.half..(r + 1) * self.half];
            let src = &x[r * dim..(r + 1) * dim];
            let dst = &mut out[r * dim..(r + 1) * dim];
            for i in 0..self.half {
                let c = cs[i];
                let s = sn[i] * sign;
                let x0 = src[2 * i];
                let x1 = src[2 * i + 1];
                dst[2 * i] = c * x0 - s * x1;
                dst[2 * i + 1] = s * x0 + c * x1;
            }
        }
    }

    /// Rotate one `head_dim` slice of a wider row layout, for buffers that
    /// pack all heads into `row_stride` columns.
    pub fn rotate_packed(
        &self,
        x: &[f32],
        row_stride: usize,
        col_offset: usize,
        inverse: bool,
        out: &mut [f32],
    ) {
        let dim = self.half * 2;
        let sign = if inverse { -1.0f32 } else { 1.0f32 };
        for r in 0..self.positions.len() {
            let cs = &self.cos[r * self.half..(r + 1) * self.half];
            let sn = &self.sin[r * self.half..(r + 1) * self.half];
            let start = r * row_stride + col_offset;
            let src = &x[start..start + dim];
            let dst = &mut out[start..start + dim];
            for i in 0..self.half {
                let c = cs[i];
                let s = sn[i] * sign;
                let x0 = src[2 * i];
                let x1 = src[2 * i + 1];
                dst[2 * i] = c * x0 - s * x1;
                dst[2 * i + 1] = s * x0 + c * x1;
            }
        }
    }
}

/// Rotate consecutive pairs of one `head_dim` vector by `pos * theta_i`.
///
/// Phases and trig run in f64 so large position offsets stay accurate.
pub fn rope_rotate_into(
    src: &[f32],
    pos: i64,
    thetas: &[f64],
    inverse: bool,
    dst: &mut [f32],
) {
    debug_assert_eq!(src.len(), thetas.len() * 2);
    let sign = if inverse { -1.0 } else { 1.0 };
    for (i, &theta) in thetas.iter().enumerate() {
        let phase = pos as f64 * theta * sign;
        let c = mathf::cos64(phase) as f32;
        let s = mathf::sin64(phase) as f32;
        let x0 = src[2 * i];
        let x1 = src[2 * i + 1];
        dst[2 * i] = c * x0 - s * x1;
        dst[2 * i + 1] = s * x0 + c * x1;
    }
}

/// Rotary rotation of a single vector at one position.
pub fn rope_rotate(vec: &[f32], pos: i64, base: f32) -> Vec<f32> {
    let thetas = rope_thetas(vec.len(), base);
    let mut out = vec![0.0; vec.len()];
    rope_rotate_into(vec, pos, &thetas, false, &mut out);
    out
}

/// Rotate every row of `x` (shape `[rows, head_dim]`) by its own position.
pub fn rope_rows(
    x: &[f32],
    positions: &[i64],
    head_dim: usize,
    base: f32,
    inverse: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(x.len(), positions.len() * head_dim);
    let thetas = rope_thetas(head_dim, base);
    for (r, &pos) in positions.iter().enumerate() {
        let src = &x[r * head_dim..(r + 1) * head_dim];
        let dst = &mut out[r * head_dim..(r + 1) * head_dim];
        rope_rotate_into(src, pos, &thetas, inverse, dst);
    }
}

/// Offsets of the saved forward state inside an attention node's aux
/// buffer: `[q_rot | k_rot | probs]`.
pub fn attention_aux_len(p: usize, d: usize, n_heads: usize) -> usize {
    2 * p * d + n_heads * p * p
}

/// Fused multi-head rotary attention.
///
/// `q`, `k`, `v` are `[p, d]` with heads packed along the width; `mask` is
/// a `[p, p]` additive mask (0 or -inf). Scores where the mask is -inf are
/// never computed. When `aux` is given, the rotated queries/keys and the
/// attention probabilities are saved for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    mask: &[f32],
    table: &RopeTable,
    n_heads: usize,
    scale: f32,
    out: &mut [f32],
    mut aux: Option<&mut Vec<f32>>,
) {
    let p = table.positions.len();
    let d = q.len() / p;
    let hd = d / n_heads;
    let mut qr = vec![0.0f32; p * d];
    let mut kr = vec![0.0f32; p * d];
    for h in 0..n_heads {
        table.rotate_packed(q, d, h * hd, false, &mut qr);
        table.rotate_packed(k, d, h * hd, false, &mut kr);
    }
    if let Some(aux) = aux.as_deref_mut() {
        aux.clear();
        aux.reserve(attention_aux_len(p, d, n_heads));
        aux.extend_from_slice(&qr);
        aux.extend_from_slice(&kr);
    }
    let mut scores = vec![0.0f32; p * p];
    let mut probs = vec![0.0f32; p * p];
    for h in 0..n_heads {
        let col = h * hd;
        for i in 0..p {
            let qi = &qr[i * d + col..i * d + col + hd];
            let srow = &mut scores[i * p..(i + 1) * p];
            let mrow = &mask[i * p..(i + 1) * p];
            for j in 0..p {
                srow[j] = if mrow[j] == f32::NEG_INFINITY {
                    f32::NEG_INFINITY
                } else {
                    dot(qi, &kr[j * d + col..j * d + col + hd]) * scale + mrow[j]
                };
            }
        }
        softmax_strided(&scores, &mut probs, p, p, p, 1);
        for i in 0..p {
            let prow = &probs[i * p..(i + 1) * p];
            let orow = &mut out[i * d + col..i * d + col + hd];
            for (j, &pj) in prow.iter().enumerate() {
                if pj != 0.0 {
                    let vrow = &v[j * d + col..j * d + col + hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
        if let Some(aux) = aux.as_deref_mut() {
            aux.extend_from_slice(&probs);
        }
    }
}

/// Backward of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    g_out: &[f32],
    v: &[f32],
    table: &RopeTable,
    n_heads: usize,
    scale: f32,
    aux: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let p = table.positions.len();
    let d = g_out.len() / p;
    let hd = d / n_heads;
    let qr = &aux[..p * d];
    let kr = &aux[p * d..2 * p * d];
    let mut d_probs = vec![0.0f32; p * p];
    let mut d_raw = vec![0.0f32; p * p];
    let mut dqr = vec![0.0f32; p * d];
    let mut dkr = vec![0.0f32; p * d];
    for h in 0..n_heads {
        let col = h * hd;
        let probs = &aux[2 * p * d + h * p * p..2 * p * d + (h + 1) * p * p];
        // dV and dProbs from the mixing step.
        for i in 0..p {
            let grow = &g_out[i * d + col..i * d + col + hd];
            let prow = &probs[i * p..(i + 1) * p];
            let dprow = &mut d_probs[i * p..(i + 1) * p];
            for j in 0..p {
                if prow[j] != 0.0 {
                    let vrow = &v[j * d + col..j * d + col + hd];
                    dprow[j] = dot(grow, vrow);
                    let dvrow = &mut dv[j * d + col..j * d + col + hd];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o += prow[j] * gv;
                    }
                } else {
                    dprow[j] = 0.0;
                }
            }
        }
        // Through the softmax, then undo the scale.
        for i in 0..p {
            let prow = &probs[i * p..(i + 1) * p];
            let dprow = &d_probs[i * p..(i + 1) * p];
            let mut s = 0.0f32;
            for j in 0..p {
                s += prow[j] * dprow[j];
            }
            let drow = &mut d_raw[i * p..(i + 1) * p];
            for j in 0..p {
                drow[j] = prow[j] * (dprow[j] - s) * scale;
            }
        }
        // dQr = dRaw * Kr, dKr = dRaw^T * Qr (per head columns).
        for i in 0..p {
            let drow = &d_raw[i * p..(i + 1) * p];
            let dqrow = &mut dqr[i * d + col..i * d + col + hd];
            dqrow.fill(0.0);
            for j in 0..p {
                if drow[j] != 0.0 {
                    let krow = &kr[j * d + col..j * d + col + hd];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += drow[j] * kv;
                    }
                }
            }
        }
        for jrow in dkr[..].chunks_mut(d).take(p) {
            jrow[col..col + hd].fill(0.0);
        }
        for i in 0..p {
            let drow = &d_raw[i * p..(i + 1) * p];
            let qrow = &qr[i * d + col..i * d + col + hd];
            for j in 0..p {
                if drow[j] != 0.0 {
                    let dkrow = &mut dkr[j * d + col..j * d + col + hd];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += drow[j] * qv;
                    }
                }
            }
        }
    }
    // Undo the rotations (inverse rope) and accumulate.
    let mut tmp = vec![0.0f32; p * d];
    for h in 0..n_heads {
        table.rotate_packed(&dqr, d, h * hd, true, &mut tmp);
    }
    for (o, &t) in dq.iter_mut().zip(&tmp) {
        *o += t;
    }
    for h in 0..n_heads {
        table.rotate_packed(&dkr, d, h * hd, true, &mut tmp);
    }
    for (o, &t) in dk.iter_mut().zip(&tmp) {
        *o += t;
    }
}
