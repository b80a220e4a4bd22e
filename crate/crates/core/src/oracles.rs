//! Test-only reference implementations, compiled under the `test-oracles`
//! feature for use by this crate's tests and the acceptance suite.
//!
//! Everything here recomputes the model per position with explicit f64
//! loops: no batched matmuls, no shared kernels, no autodiff. These paths
//! exist to check the production implementations and must stay independent
//! of them.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ActivationCache, ModelConfig, ModelParams};

const LN_EPS: f64 = 1e-5;

pub struct NaiveModel<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
}

impl<'a> NaiveModel<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig) -> Self {
        Self { params, cfg }
    }

    fn ln(&self, x: &[f64], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / libm::sqrt(var + LN_EPS);
        x.iter()
            .enumerate()
            .map(|(c, v)| (v - mean) * rstd * gamma[c] as f64 + beta[c] as f64)
            .collect()
    }

    fn matvec(
        &self,
        w: &[f32],
        _d_in: usize,
        d_out: usize,
        x: &[f64],
        b: Option<&[f32]>,
    ) -> Vec<f64> {
        let mut out = vec![0.0f64; d_out];
        for (o, out_v) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (i, &xv) in x.iter().enumerate() {
                acc += xv * w[i * d_out + o] as f64;
            }
            *out_v = acc + b.map_or(0.0, |b| b[o] as f64);
        }
        out
    }

    fn rope(&self, v: &mut [f64], pos: i64) {
        let hd = v.len();
        for i in 0..hd / 2 {
            let theta = libm::pow(self.cfg.rope_base as f64, -2.0 * i as f64 / hd as f64);
            let phase = pos as f64 * theta;
            let (s, c) = (libm::sin(phase), libm::cos(phase));
            let (x0, x1) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = c * x0 - s * x1;
            v[2 * i + 1] = s * x0 + c * x1;
        }
    }

    fn gelu(&self, x: f64) -> f64 {
        let u = libm::sqrt(2.0 / core::f64::consts::PI) * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + libm::tanh(u))
    }

    /// Per-position forward over explicit embeddings. `allowed(i, j)` is
    /// the attention mask; `overwrite` pins context rows of every layer
    /// input (and the final checkpoint) to cached values — the brute-force
    /// semantics of a frozen context.
    pub fn forward(
        &self,
        emb: &[Vec<f64>],
        positions: &[i64],
        allowed: &dyn Fn(usize, usize) -> bool,
        overwrite: Option<(&ActivationCache, usize)>,
    ) -> Vec<Vec<f64>> {
        let p = emb.len();
        let d = self.cfg.width;
        let hd = self.cfg.head_dim();
        let mut x: Vec<Vec<f64>> = emb.to_vec();
        for (li, layer) in self.params.layers.iter().enumerate() {
            if let Some((cache, ctx_len)) = overwrite {
                for (i, row) in x.iter_mut().enumerate().take(ctx_len) {
                    *row = cache.resid_at(li, i).iter().map(|&v| v as f64).collect();
                }
            }
            let ln1: Vec<Vec<f64>> = x
                .iter()
                .map(|r| self.ln(r, layer.ln1_g.data(), layer.ln1_b.data()))
                .collect();
            let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(p);
            let mut v: Vec<Vec<f64>> = Vec::with_capacity(p);
            for i in 0..p {
                let mut qi = self.matvec(layer.wq.data(), d, d, &ln1[i], Some(layer.bq.data()));
                let mut ki = self.matvec(layer.wk.data(), d, d, &ln1[i], Some(layer.bk.data()));
                let vi = self.matvec(layer.wv.data(), d, d, &ln1[i], Some(layer.bv.data()));
                for h in 0..self.cfg.n_heads {
                    self.rope(&mut qi[h * hd..(h + 1) * hd], positions[i]);
                    self.rope(&mut ki[h * hd..(h + 1) * hd], positions[i]);
                }
                q.push(qi);
                k.push(ki);
                v.push(vi);
            }
            let scale = 1.0 / libm::sqrt(hd as f64);
            let mut attn: Vec<Vec<f64>> = vec![vec![0.0; d]; p];
            for i in 0..p {
                for h in 0..self.cfg.n_heads {
                    let cols = h * hd..(h + 1) * hd;
                    let mut scores = Vec::new();
                    for j in 0..p {
                        if allowed(i, j) {
                            let s: f64 = q[i][cols.clone()]
                                .iter()
                                .zip(&k[j][cols.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            scores.push((j, s * scale));
                        }
                    }
                    let max = scores
                        .iter()
                        .map(|(_, s)| *s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut weights: Vec<(usize, f64)> = scores
                        .iter()
                        .map(|&(j, s)| (j, libm::exp(s - max)))
                        .collect();
                    let z: f64 = weights.iter().map(|(_, w)| w).sum();
                    for w in weights.iter_mut() {
                        w.1 /= z;
                    }
                    for (j, w) in weights {
                        for (o, c) in cols.clone().enumerate() {
                            attn[i][c] += w * v[j][h * hd + o];
                        }
                    }
                }
            }
            for i in 0..p {
                let proj = self.matvec(layer.wo.data(), d, d, &attn[i], Some(layer.bo.data()));
                for c in 0..d {
                    x[i][c] += proj[c];
                }
                let ln2 = self.ln(&x[i], layer.ln2_g.data(), layer.ln2_b.data());
                let up = self.matvec(
                    layer.w_up.data(),
                    d,
                    self.cfg.hidden_dim(),
                    &ln2,
                    Some(layer.b_up.data()),
                );
                let act: Vec<f64> = up.iter().map(|&u| self.gelu(u)).collect();
                let down = self.matvec(
                    layer.w_down.data(),
                    self.cfg.hidden_dim(),
                    d,
                    &act,
                    Some(layer.b_down.data()),
                );
                for c in 0..d {
                    x[i][c] += down[c];
                }
            }
        }
        if let Some((cache, ctx_len)) = overwrite {
            for (i, row) in x.iter_mut().enumerate().take(ctx_len) {
                *row = cache
                    .resid_at(self.cfg.n_layers, i)
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
            }
        }
        x.iter()
            .map(|r| {
                let normed = self.ln(r, self.params.ln_f_g.data(), self.params.ln_f_b.data());
                self.matvec(
                    self.params.unembed.data(),
                    d,
                    self.cfg.vocab_size,
                    &normed,
                    None,
                )
            })
            .collect()
    }

    /// Brute-force frozen-context query: run the overwrite-style forward
    /// over `[context | question]` and return the last position's logits.
    pub fn overwrite_query(&self, cache: &ActivationCache, question: &[u32]) -> Vec<f64> {
        let d = self.cfg.width;
        let table = self.params.tok_embed.data();
        let ctx_len = cache.len;
        let mut emb: Vec<Vec<f64>> = (0..ctx_len).map(|_| vec![0.0; d]).collect();
        let mut positions = cache.positions.clone();
        let next = positions.iter().copied().max().unwrap_or(-1) + 1;
        for (qi, &tok) in question.iter().enumerate() {
            emb.push(
                table[tok as usize * d..(tok as usize + 1) * d]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            );
            positions.push(next + qi as i64);
        }
        let logits = self.forward(&emb, &positions, &|i, j| j <= i, Some((cache, ctx_len)));
        logits[ctx_len + question.len() - 1].clone()
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

use crate::rng::Pcg32;
use crate::tensor::{Graph, Tensor, Var};
use alloc::boxed::Box;
use alloc::sync::Arc;

pub const FD_STEP: f32 = 1e-3;
pub const FD_REL_TOL: f32 = 1e-2;
/// f32 central differences carry noise of about `eps * |loss| / (2h)`, a
/// few 1e-4 at loss scale 1; components below this floor are compared
/// absolutely.
pub const FD_ABS_TOL: f32 = 5e-3;

fn rand_tensor(rng: &mut Pcg32, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gauss() * 0.8).collect()).unwrap()
}

/// Scalar loss = sum(out * W) with a fixed random weighting, so every
/// output element receives a distinct gradient.
fn weighted_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = Pcg32::new(seed, 0x10BA1);
    let w = rand_tensor(&mut rng, &shape);
    let w = g.constant(w);
    let prod = g.mul(out, w).expect("same shape");
    g.sum(prod)
}

/// Pass when the difference clears either the absolute floor or the
/// relative tolerance.
pub fn fd_agrees(analytic: f32, numeric: f32) -> bool {
    let abs = (analytic - numeric).abs();
    let rel = abs / analytic.abs().max(numeric.abs()).max(f32::MIN_POSITIVE);
    abs <= FD_ABS_TOL || rel <= FD_REL_TOL
}

/// Check d(loss)/d(inputs) against central finite differences for one op
/// construction; panics with a description on disagreement.
pub fn gradcheck_op(
    name: &str,
    input_shapes: &[&[usize]],
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let mut rng = Pcg32::new(seed, 0x6AD);
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .map(|s| rand_tensor(&mut rng, s))
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(Arc::new(t.clone())))
        .collect();
    let out = build(&mut g, &vars);
    let loss = weighted_loss(&mut g, out, seed);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let eval = |tensors: &[Tensor]| -> f32 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.param(Arc::new(t.clone())))
            .collect();
        let out = build(&mut g, &vars);
        let loss = weighted_loss(&mut g, out, seed);
        g.value(loss).data()[0]
    };

    for (ti, base) in inputs.iter().enumerate() {
        assert!(!analytic[ti].is_empty(), "{name}: no gradient for input {ti}");
        for e in 0..base.numel() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[e] += FD_STEP;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[ti][e];
            assert!(
                fd_agrees(a, numeric),
                "{name} input {ti} elem {e}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Every registered graph op with a canonical small-shape check. Callers
/// feed seeds; each entry panics on disagreement.
#[allow(clippy::type_complexity)]
pub fn op_gradcheck_registry() -> Vec<(&'static str, Box<dyn Fn(u64)>)> {
    vec![
        ("matmul", Box::new(|s| {
            gradcheck_op("matmul", &[&[3, 4], &[4, 2]], s, |g, v| g.matmul(v[0], v[1]).unwrap())
        })),
        ("add", Box::new(|s| {
            gradcheck_op("add", &[&[3, 4], &[3, 4]], s, |g, v| g.add(v[0], v[1]).unwrap())
        })),
        ("add_row", Box::new(|s| {
            gradcheck_op("add_row", &[&[3, 4], &[4]], s, |g, v| g.add(v[0], v[1]).unwrap())
        })),
        ("mul", Box::new(|s| {
            gradcheck_op("mul", &[&[2, 5], &[2, 5]], s, |g, v| g.mul(v[0], v[1]).unwrap())
        })),
        ("scale", Box::new(|s| {
            gradcheck_op("scale", &[&[4, 3]], s, |g, v| g.scale(v[0], -1.7))
        })),
        ("softmax_rows", Box::new(|s| {
            gradcheck_op("softmax_rows", &[&[3, 5]], s, |g, v| g.softmax(v[0], 1).unwrap())
        })),
        ("softmax_cols", Box::new(|s| {
            gradcheck_op("softmax_cols", &[&[3, 5]], s, |g, v| g.softmax(v[0], 0).unwrap())
        })),
        ("log_softmax", Box::new(|s| {
            gradcheck_op("log_softmax", &[&[2, 6]], s, |g, v| g.log_softmax(v[0], 1).unwrap())
        })),
        ("layer_norm", Box::new(|s| {
            gradcheck_op("layer_norm", &[&[3, 6], &[6], &[6]], s, |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
            })
        })),
        ("gelu", Box::new(|s| {
            gradcheck_op("gelu", &[&[4, 4]], s, |g, v| g.gelu(v[0]))
        })),
        ("embedding_lookup", Box::new(|s| {
            gradcheck_op("embedding_lookup", &[&[5, 3]], s, |g, v| {
                g.embed(v[0], &[4, 0, 2, 2]).unwrap()
            })
        })),
        ("concat_rows", Box::new(|s| {
            gradcheck_op("concat_rows", &[&[2, 3], &[4, 3]], s, |g, v| {
                g.concat(&[v[0], v[1]], 0).unwrap()
            })
        })),
        ("concat_cols", Box::new(|s| {
            gradcheck_op("concat_cols", &[&[3, 2], &[3, 5]], s, |g, v| {
                g.concat(&[v[0], v[1]], 1).unwrap()
            })
        })),
        ("slice", Box::new(|s| {
            gradcheck_op("slice", &[&[5, 6]], s, |g, v| {
                g.slice(v[0], [1, 2], [4, 5]).unwrap()
            })
        })),
        ("reshape", Box::new(|s| {
            gradcheck_op("reshape", &[&[3, 4]], s, |g, v| {
                g.reshape(v[0], alloc::vec![2, 6]).unwrap()
            })
        })),
        ("transpose", Box::new(|s| {
            gradcheck_op("transpose", &[&[3, 5]], s, |g, v| g.transpose(v[0]).unwrap())
        })),
        ("rope", Box::new(|s| {
            gradcheck_op("rope", &[&[4, 8]], s, |g, v| {
                g.rope(v[0], &[0, 3, 11, 40], 10_000.0).unwrap()
            })
        })),
        ("attention", Box::new(|s| {
            gradcheck_op("attention", &[&[5, 8], &[5, 8], &[5, 8]], s, |g, v| {
                let mask = g.constant(crate::model::causal_mask(5));
                let table = Arc::new(crate::tensor::kernels::RopeTable::new(
                    &[0, 1, 2, 3, 4],
                    4,
                    10_000.0,
                ));
                g.attention(v[0], v[1], v[2], mask, table, 2, 0.5).unwrap()
            })
        })),
        ("sum", Box::new(|s| {
            gradcheck_op("sum", &[&[3, 3]], s, |g, v| {
                let t = g.sum(v[0]);
                g.reshape(t, alloc::vec![1, 1]).unwrap()
            })
        })),
        ("mean", Box::new(|s| {
            gradcheck_op("mean", &[&[2, 7]], s, |g, v| {
                let t = g.mean(v[0]);
                g.reshape(t, alloc::vec![1, 1]).unwrap()
            })
        })),
    ]
}
