//! Question answering against a frozen activation cache.
//!
//! At every layer, keys and values for context positions are recomputed from
//! the cache's stored residual stream (with rotary phases taken from
//! `cache.positions`), never from a fresh context forward. Question tokens
//! run normally, attending to the frozen context plus themselves causally.
//! Everything here works on plain buffers through the shared kernels; no
//! gradient graph is involved.

use alloc::vec;
use alloc::vec::Vec;

use super::{ActivationCache, ModelConfig, ModelError, ModelParams};
use crate::mathf;
use crate::shapes::vocab::IMG_ID;
use crate::tensor::kernels;

const LN_EPS: f32 = 1e-5;

/// Per-layer rotated keys and values of a cached context.
pub struct FrozenContext {
    pub len: usize,
    /// First free rotary position after the cache (respects remaps).
    pub next_pos: i64,
    /// `[n_layers][len * width]`, rope applied per head at cache positions.
    k_rot: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

fn layer_norm_plain(x: &[f32], gamma: &[f32], beta: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    let mut aux = Vec::new();
    kernels::layer_norm_rows(x, gamma, beta, LN_EPS, rows, cols, &mut out, &mut aux);
    out
}

fn rope_heads(src: &[f32], table: &kernels::RopeTable, n_heads: usize, head_dim: usize) -> Vec<f32> {
    let width = n_heads * head_dim;
    let mut out = vec![0.0; src.len()];
    for h in 0..n_heads {
        table.rotate_packed(src, width, h * head_dim, false, &mut out);
    }
    out
}

/// Projected parameters of one attention op applied to plain buffers.
fn project(x: &[f32], w: &[f32], b: &[f32], rows: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * d_out];
    kernels::matmul_nn(x, w, rows, d_in, d_out, &mut out);
    for row in out.chunks_mut(d_out) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// Compute per-layer frozen keys/values from a cache.
pub fn freeze_context(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ActivationCache,
) -> Result<FrozenContext, ModelError> {
    cfg.validate()?;
    if cache.len == 0 {
        return Err(ModelError::EmptyCache);
    }
    if cache.n_layers != cfg.n_layers || cache.width != cfg.width {
        return Err(ModelError::StructuralMismatch("cache does not fit the model config"));
    }
    let d = cfg.width;
    let p = cache.len;
    let table = kernels::RopeTable::new(&cache.positions, cfg.head_dim(), cfg.rope_base);
    let mut k_rot = Vec::with_capacity(cfg.n_layers);
    let mut v_all = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let ln1 = layer_norm_plain(
            cache.checkpoint(l),
            layer.ln1_g.data(),
            layer.ln1_b.data(),
            p,
            d,
        );
        let k = project(&ln1, layer.wk.data(), layer.bk.data(), p, d, d);
        let v = project(&ln1, layer.wv.data(), layer.bv.data(), p, d, d);
        k_rot.push(rope_heads(&k, &table, cfg.n_heads, cfg.head_dim()));
        v_all.push(v);
    }
    let next_pos = cache.positions.iter().copied().max().unwrap_or(-1) + 1;
    Ok(FrozenContext {
        len: p,
        next_pos,
        k_rot,
        v: v_all,
    })
}

/// Run question tokens against a frozen context; returns the logits of the
/// final question position (the answer marker).
pub fn frozen_query(
    params: &ModelParams,
    cfg: &ModelConfig,
    frozen: &FrozenContext,
    question: &[u32],
) -> Result<Vec<f32>, ModelError> {
    if question.is_empty() {
        return Err(ModelError::EmptyCache);
    }
    if question.iter().any(|&t| t == IMG_ID) {
        return Err(ModelError::ImageTokenInQuestion);
    }
    let d = cfg.width;
    let hd = cfg.head_dim();
    let q_len = question.len();
    let p = frozen.len;
    let total = p + q_len;
    let scale = 1.0 / mathf::sqrtf(hd as f32);
    let qpos: Vec<i64> = (0..q_len as i64).map(|i| frozen.next_pos + i).collect();
    let qtable = kernels::RopeTable::new(&qpos, hd, cfg.rope_base);

    // Token-table embeddings of the question.
    let table = params.tok_embed.data();
    let mut x = Vec::with_capacity(q_len * d);
    for &t in question {
        let t = t as usize;
        if t >= cfg.vocab_size {
            return Err(ModelError::Tensor(crate::tensor::TensorError::BadTokenId {
                id: t as u32,
                vocab: cfg.vocab_size,
            }));
        }
        x.extend_from_slice(&table[t * d..(t + 1) * d]);
    }

    for (l, layer) in params.layers.iter().enumerate() {
        let ln1 = layer_norm_plain(&x, layer.ln1_g.data(), layer.ln1_b.data(), q_len, d);
        let q = project(&ln1, layer.wq.data(), layer.bq.data(), q_len, d, d);
        let k = project(&ln1, layer.wk.data(), layer.bk.data(), q_len, d, d);
        let v = project(&ln1, layer.wv.data(), layer.bv.data(), q_len, d, d);
        let q_rot = rope_heads(&q, &qtable, cfg.n_heads, hd);
        let k_rot = rope_heads(&k, &qtable, cfg.n_heads, hd);

        let ctx_k = &frozen.k_rot[l];
        let ctx_v = &frozen.v[l];
        let mut attn = vec![0.0; q_len * d];
        let mut scores = vec![0.0; q_len * total];
        let mut probs = vec![0.0; q_len * total];
        for h in 0..cfg.n_heads {
            let col = h * hd;
            for i in 0..q_len {
                let qi = &q_rot[i * d + col..i * d + col + hd];
                let row = &mut scores[i * total..(i + 1) * total];
                for j in 0..p {
                    row[j] = kernels::dot(qi, &ctx_k[j * d + col..j * d + col + hd]) * scale;
                }
                for j in 0..q_len {
                    row[p + j] = if j <= i {
                        kernels::dot(qi, &k_rot[j * d + col..j * d + col + hd]) * scale
                    } else {
                        f32::NEG_INFINITY
                    };
                }
            }
            kernels::softmax_strided(&scores, &mut probs, q_len, total, total, 1);
            for i in 0..q_len {
                let prow = &probs[i * total..(i + 1) * total];
                let out = &mut attn[i * d + col..i * d + col + hd];
                for (j, &pj) in prow.iter().take(p).enumerate() {
                    let vrow = &ctx_v[j * d + col..j * d + col + hd];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
                for (j, &pj) in prow[p..].iter().enumerate() {
                    let vrow = &v[j * d + col..j * d + col + hd];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let proj = project(&attn, layer.wo.data(), layer.bo.data(), q_len, d, d);
        for (o, &pv) in x.iter_mut().zip(&proj) {
            *o += pv;
        }

        let ln2 = layer_norm_plain(&x, layer.ln2_g.data(), layer.ln2_b.data(), q_len, d);
        let mut up = project(
            &ln2,
            layer.w_up.data(),
            layer.b_up.data(),
            q_len,
            d,
            cfg.hidden_dim(),
        );
        for u in up.iter_mut() {
            *u = kernels::gelu(*u);
        }
        let down = project(&up, layer.w_down.data(), layer.b_down.data(), q_len, cfg.hidden_dim(), d);
        for (o, &dv) in x.iter_mut().zip(&down) {
            *o += dv;
        }
    }

    let last = &x[(q_len - 1) * d..q_len * d];
    let normed = layer_norm_plain(last, params.ln_f_g.data(), params.ln_f_b.data(), 1, d);
    let mut logits = vec![0.0; cfg.vocab_size];
    kernels::matmul_nn(&normed, params.unembed.data(), 1, d, cfg.vocab_size, &mut logits);
    Ok(logits)
}

/// Freeze a cache and answer one question against it.
pub fn forward_with_frozen_context(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    question: &[u32],
) -> Result<Vec<f32>, ModelError> {
    let frozen = freeze_context(params, cfg, cache)?;
    frozen_query(params, cfg, &frozen, question)
}

/// Two-way log probabilities of a pair of tokens under the full softmax
/// renormalized to just those two (the item metric every experiment uses).
pub fn two_way_logprobs(logits: &[f32], a: u32, b: u32) -> (f32, f32) {
    let (la, lb) = (logits[a as usize], logits[b as usize]);
    let m = la.max(lb);
    let z = m + mathf::lnf(mathf::expf(la - m) + mathf::expf(lb - m));
    (la - z, lb - z)
}
