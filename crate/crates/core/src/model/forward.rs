//! Prompt embedding and the differentiable forward pass.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{ActivationCache, ModelConfig, ModelError, ModelParams};
use crate::shapes::vocab::IMG_ID;
use crate::shapes::{render, ShapesInstance};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles of every parameter, in [`ModelParams::named`] order.
pub struct ParamVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub tok_embed: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f_g: Var,
    pub ln_f_b: Var,
    pub unembed: Var,
}

pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl ParamVars {
    /// Flat listing aligned with [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.tok_embed];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                l.ln2_b, l.w_up, l.b_up, l.w_down, l.b_down,
            ]);
        }
        out.extend([self.ln_f_g, self.ln_f_b, self.unembed]);
        out
    }
}

/// Register every parameter as a shared trainable leaf.
pub fn bind_params(g: &mut Graph, params: &ModelParams) -> ParamVars {
    let layers = params
        .layers
        .iter()
        .map(|l| LayerVars {
            ln1_g: g.param(Arc::clone(&l.ln1_g)),
            ln1_b: g.param(Arc::clone(&l.ln1_b)),
            wq: g.param(Arc::clone(&l.wq)),
            bq: g.param(Arc::clone(&l.bq)),
            wk: g.param(Arc::clone(&l.wk)),
            bk: g.param(Arc::clone(&l.bk)),
            wv: g.param(Arc::clone(&l.wv)),
            bv: g.param(Arc::clone(&l.bv)),
            wo: g.param(Arc::clone(&l.wo)),
            bo: g.param(Arc::clone(&l.bo)),
            ln2_g: g.param(Arc::clone(&l.ln2_g)),
            ln2_b: g.param(Arc::clone(&l.ln2_b)),
            w_up: g.param(Arc::clone(&l.w_up)),
            b_up: g.param(Arc::clone(&l.b_up)),
            w_down: g.param(Arc::clone(&l.w_down)),
            b_down: g.param(Arc::clone(&l.b_down)),
        })
        .collect();
    ParamVars {
        patch_w: g.param(Arc::clone(&params.patch_w)),
        patch_b: g.param(Arc::clone(&params.patch_b)),
        tok_embed: g.param(Arc::clone(&params.tok_embed)),
        layers,
        ln_f_g: g.param(Arc::clone(&params.ln_f_g)),
        ln_f_b: g.param(Arc::clone(&params.ln_f_b)),
        unembed: g.param(Arc::clone(&params.unembed)),
    }
}

/// Additive attention mask.
pub enum AttnMask {
    Causal,
    /// Arbitrary `[P, P]` additive mask (0 = attend, -inf = blocked).
    Additive(Arc<Tensor>),
}

/// Standard causal mask: position i attends to j <= i.
pub fn causal_mask(p: usize) -> Tensor {
    let mut data = vec![f32::NEG_INFINITY; p * p];
    for i in 0..p {
        for j in 0..=i {
            data[i * p + j] = 0.0;
        }
    }
    Tensor::from_vec(vec![p, p], data).expect("mask shape")
}

/// Input embeddings for a prompt: the BOS row and text rows come from the
/// token table, the image-placeholder run carries projected patch rows in
/// raster order (base view first, then each crop).
pub fn embed_prompt(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    instance: &ShapesInstance,
) -> Result<Var, ModelError> {
    let tokens = &instance.tokens;
    let n_img = tokens.iter().filter(|&&t| t == IMG_ID).count();
    let patches = render::patchify(&instance.image, instance.scene.multi_crop);
    let patch_rows = patches.len() / cfg.patch_dim;
    if patch_rows != n_img {
        return Err(ModelError::PatchCount {
            expected: n_img,
            got: patch_rows,
        });
    }
    // Fixed layout: [BOS][img * n][text...]; verify before splicing segments.
    if tokens[1..=n_img].iter().any(|&t| t != IMG_ID)
        || tokens[1 + n_img..].iter().any(|&t| t == IMG_ID)
    {
        return Err(ModelError::StructuralMismatch(
            "image placeholders must form one run after BOS",
        ));
    }
    let bos = g.embed(pv.tok_embed, &tokens[..1])?;
    let patch_mat = g.constant(Tensor::from_vec(vec![patch_rows, cfg.patch_dim], patches)?);
    let projected = g.matmul(patch_mat, pv.patch_w)?;
    let img = g.add(projected, pv.patch_b)?;
    let text = g.embed(pv.tok_embed, &tokens[1 + n_img..])?;
    Ok(g.concat(&[bos, img, text], 0)?)
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[P, vocab]` logits at every position.
    pub logits: Var,
    /// Residual stream at each layer input plus the final output.
    pub checkpoints: Vec<Var>,
}

const LN_EPS: f32 = 1e-5;

/// Causal transformer forward over pre-built embeddings.
///
/// Positions feed the rotary rotation of queries and keys and nothing else;
/// there is no additive position embedding anywhere.
pub fn forward(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    emb: Var,
    positions: &[i64],
    mask: &AttnMask,
) -> Result<ForwardOutput, ModelError> {
    cfg.validate()?;
    let p = g.value(emb).shape()[0];
    if positions.len() != p {
        return Err(ModelError::PositionCount {
            expected: p,
            got: positions.len(),
        });
    }
    for &pos in positions {
        if pos < 0 || pos >= cfg.max_positions as i64 {
            return Err(ModelError::PositionOutOfRange {
                position: pos,
                max: cfg.max_positions,
            });
        }
    }
    let mask_var = match mask {
        AttnMask::Causal => g.constant(causal_mask(p)),
        AttnMask::Additive(m) => {
            if m.shape() != [p, p] {
                return Err(ModelError::StructuralMismatch("mask shape"));
            }
            g.constant_shared(Arc::clone(m))
        }
    };

    let hd = cfg.head_dim();
    let scale = 1.0 / crate::mathf::sqrtf(hd as f32);
    let rope_table = Arc::new(crate::tensor::kernels::RopeTable::new(
        positions,
        hd,
        cfg.rope_base,
    ));
    let mut x = emb;
    let mut checkpoints = Vec::with_capacity(cfg.n_layers + 1);
    for layer in &pv.layers {
        checkpoints.push(x);
        let ln1 = g.layer_norm(x, layer.ln1_g, layer.ln1_b, LN_EPS)?;
        let q = g.matmul(ln1, layer.wq)?;
        let q = g.add(q, layer.bq)?;
        let k = g.matmul(ln1, layer.wk)?;
        let k = g.add(k, layer.bk)?;
        let v = g.matmul(ln1, layer.wv)?;
        let v = g.add(v, layer.bv)?;
        let attn = g.attention(
            q,
            k,
            v,
            mask_var,
            Arc::clone(&rope_table),
            cfg.n_heads,
            scale,
        )?;
        let proj = g.matmul(attn, layer.wo)?;
        let proj = g.add(proj, layer.bo)?;
        x = g.add(x, proj)?;

        let ln2 = g.layer_norm(x, layer.ln2_g, layer.ln2_b, LN_EPS)?;
        let up = g.matmul(ln2, layer.w_up)?;
        let up = g.add(up, layer.b_up)?;
        let act = g.gelu(up);
        let down = g.matmul(act, layer.w_down)?;
        let down = g.add(down, layer.b_down)?;
        x = g.add(x, down)?;
    }
    checkpoints.push(x);
    let ln_f = g.layer_norm(x, pv.ln_f_g, pv.ln_f_b, LN_EPS)?;
    let logits = g.matmul(ln_f, pv.unembed)?;
    Ok(ForwardOutput {
        logits,
        checkpoints,
    })
}

/// Copy the recorded residual checkpoints out of the graph.
pub fn extract_cache(
    g: &Graph,
    out: &ForwardOutput,
    cfg: &ModelConfig,
    positions: &[i64],
    spans: Option<crate::shapes::SpanTable>,
) -> ActivationCache {
    let len = positions.len();
    let mut resid = Vec::with_capacity((cfg.n_layers + 1) * len * cfg.width);
    for &cp in &out.checkpoints {
        resid.extend_from_slice(g.value(cp).data());
    }
    ActivationCache::from_parts(
        cfg.n_layers,
        cfg.width,
        len,
        resid,
        positions.to_vec(),
        spans,
    )
}

/// Embed and run one full prompt with sequential positions and the causal
/// mask. Returns the graph so callers can read logits or run backward.
pub fn full_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    instance: &ShapesInstance,
    with_grads: bool,
) -> Result<(Graph, ParamVars, ForwardOutput), ModelError> {
    let mut g = if with_grads {
        Graph::new()
    } else {
        Graph::inference()
    };
    let pv = bind_params(&mut g, params);
    let emb = embed_prompt(&mut g, &pv, cfg, instance)?;
    let positions: Vec<i64> = (0..instance.tokens.len() as i64).collect();
    let out = forward(&mut g, &pv, cfg, emb, &positions, &AttnMask::Causal)?;
    Ok((g, pv, out))
}
