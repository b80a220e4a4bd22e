//! The toy vision-language model: a linear patch embedder feeding a
//! decoder-only transformer with rotary position embeddings.
//!
//! The residual stream is checkpointed at every layer input plus the final
//! output, which is exactly the quantity the intervention suite replaces,
//! shifts and edits. [`ActivationCache`] owns those checkpoints together
//! with per-token rotary positions; additive edits go through a small
//! ledger so that applying a patch and then its negation restores the
//! original buffer bit for bit.

pub mod forward;
pub mod frozen;

pub use forward::{
    bind_params, causal_mask, embed_prompt, extract_cache, forward, full_forward, AttnMask,
    ForwardOutput, ParamVars,
};
pub use frozen::{
    forward_with_frozen_context, freeze_context, frozen_query, two_way_logprobs, FrozenContext,
};

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::Pcg32;
use crate::shapes::{SpanTable, TaskError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    Task(TaskError),
    BadConfig(&'static str),
    PatchCount { expected: usize, got: usize },
    PositionCount { expected: usize, got: usize },
    PositionOutOfRange { position: i64, max: usize },
    EmptyCache,
    ImageTokenInQuestion,
    StructuralMismatch(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "tensor error: {e}"),
            Self::Task(e) => write!(f, "task error: {e}"),
            Self::BadConfig(m) => write!(f, "bad model config: {m}"),
            Self::PatchCount { expected, got } => {
                write!(f, "image placeholder count {expected} != patch rows {got}")
            }
            Self::PositionCount { expected, got } => {
                write!(f, "expected {expected} positions, got {got}")
            }
            Self::PositionOutOfRange { position, max } => {
                write!(f, "position {position} outside [0, {max})")
            }
            Self::EmptyCache => write!(f, "activation cache is empty"),
            Self::ImageTokenInQuestion => write!(f, "question contains image placeholder tokens"),
            Self::StructuralMismatch(m) => write!(f, "structural mismatch: {m}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<TaskError> for ModelError {
    fn from(e: TaskError) -> Self {
        Self::Task(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub rope_base: f32,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            width: 128,
            n_heads: 4,
            vocab_size: crate::shapes::Vocabulary::standard().len(),
            patch_dim: crate::shapes::render::PATCH_DIM,
            rope_base: 10_000.0,
            max_positions: 4096,
        }
    }
}

impl ModelConfig {
    /// A minimal configuration for gradient checks and oracle tests.
    pub fn tiny(n_layers: usize, width: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            width,
            n_heads,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.width == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension"));
        }
        if self.width % self.n_heads != 0 {
            return Err(ModelError::BadConfig("width not divisible by heads"));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::BadConfig("head_dim must be even for RoPE"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Arc<Tensor>,
    pub ln1_b: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub bq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub bk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub bv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub bo: Arc<Tensor>,
    pub ln2_g: Arc<Tensor>,
    pub ln2_b: Arc<Tensor>,
    pub w_up: Arc<Tensor>,
    pub b_up: Arc<Tensor>,
    pub w_down: Arc<Tensor>,
    pub b_down: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch_w: Arc<Tensor>,
    pub patch_b: Arc<Tensor>,
    pub tok_embed: Arc<Tensor>,
    pub layers: Vec<LayerParams>,
    pub ln_f_g: Arc<Tensor>,
    pub ln_f_b: Arc<Tensor>,
    pub unembed: Arc<Tensor>,
}

const INIT_STD: f32 = 0.02;

fn gauss_tensor(rng: &mut Pcg32, shape: Vec<usize>, std: f32) -> Arc<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gauss() * std).collect();
    Arc::new(Tensor::from_vec(shape, data).expect("init shape"))
}

fn const_tensor(shape: Vec<usize>, value: f32) -> Arc<Tensor> {
    let n: usize = shape.iter().product();
    Arc::new(Tensor::from_vec(shape, vec![value; n]).expect("init shape"))
}

impl ModelParams {
    /// GPT-2 style init: N(0, 0.02) everywhere, residual-feeding projections
    /// scaled down by sqrt(2 * n_layers).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.width;
        let mut rng = Pcg32::new(seed, 0xA11);
        let resid_std = INIT_STD / crate::mathf::sqrtf(2.0 * cfg.n_layers as f32);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: const_tensor(vec![d], 1.0),
                ln1_b: const_tensor(vec![d], 0.0),
                wq: gauss_tensor(&mut rng, vec![d, d], INIT_STD),
                bq: const_tensor(vec![d], 0.0),
                wk: gauss_tensor(&mut rng, vec![d, d], INIT_STD),
                bk: const_tensor(vec![d], 0.0),
                wv: gauss_tensor(&mut rng, vec![d, d], INIT_STD),
                bv: const_tensor(vec![d], 0.0),
                wo: gauss_tensor(&mut rng, vec![d, d], resid_std),
                bo: const_tensor(vec![d], 0.0),
                ln2_g: const_tensor(vec![d], 1.0),
                ln2_b: const_tensor(vec![d], 0.0),
                w_up: gauss_tensor(&mut rng, vec![d, cfg.hidden_dim()], INIT_STD),
                b_up: const_tensor(vec![cfg.hidden_dim()], 0.0),
                w_down: gauss_tensor(&mut rng, vec![cfg.hidden_dim(), d], resid_std),
                b_down: const_tensor(vec![d], 0.0),
            });
        }
        let tok_embed = gauss_tensor(&mut rng, vec![cfg.vocab_size, d], INIT_STD);
        // The unembedding starts as the transpose of the token table (it
        // stays an independent trainable tensor). Aligned readout gives the
        // answer-copy pathway a usable gradient from the first step; with
        // an unrelated random readout the copy circuit forms far slower.
        let mut unembed = Tensor::zeros(vec![d, cfg.vocab_size]);
        for v in 0..cfg.vocab_size {
            for c in 0..d {
                unembed.data_mut()[c * cfg.vocab_size + v] = tok_embed.data()[v * d + c];
            }
        }
        Self {
            patch_w: gauss_tensor(&mut rng, vec![cfg.patch_dim, d], INIT_STD),
            patch_b: const_tensor(vec![d], 0.0),
            tok_embed,
            layers,
            ln_f_g: const_tensor(vec![d], 1.0),
            ln_f_b: const_tensor(vec![d], 0.0),
            unembed: Arc::new(unembed),
        }
    }

    /// Stable name/tensor listing; the optimizer and checkpoint format rely
    /// on this order.
    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> = vec![
            ("patch_proj.w".into(), &self.patch_w),
            ("patch_proj.b".into(), &self.patch_b),
            ("tok_embed".into(), &self.tok_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &l.ln1_g),
                ("ln1.b", &l.ln1_b),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.g", &l.ln2_g),
                ("ln2.b", &l.ln2_b),
                ("mlp.w_up", &l.w_up),
                ("mlp.b_up", &l.b_up),
                ("mlp.w_down", &l.w_down),
                ("mlp.b_down", &l.b_down),
            ] {
                out.push((alloc::format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.g".into(), &self.ln_f_g));
        out.push(("ln_f.b".into(), &self.ln_f_b));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out: Vec<(String, &mut Arc<Tensor>)> = vec![
            ("patch_proj.w".into(), &mut self.patch_w),
            ("patch_proj.b".into(), &mut self.patch_b),
            ("tok_embed".into(), &mut self.tok_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &mut l.ln1_g),
                ("ln1.b", &mut l.ln1_b),
                ("attn.wq", &mut l.wq),
                ("attn.bq", &mut l.bq),
                ("attn.wk", &mut l.wk),
                ("attn.bk", &mut l.bk),
                ("attn.wv", &mut l.wv),
                ("attn.bv", &mut l.bv),
                ("attn.wo", &mut l.wo),
                ("attn.bo", &mut l.bo),
                ("ln2.g", &mut l.ln2_g),
                ("ln2.b", &mut l.ln2_b),
                ("mlp.w_up", &mut l.w_up),
                ("mlp.b_up", &mut l.b_up),
                ("mlp.w_down", &mut l.w_down),
                ("mlp.b_down", &mut l.b_down),
            ] {
                out.push((alloc::format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.g".into(), &mut self.ln_f_g));
        out.push(("ln_f.b".into(), &mut self.ln_f_b));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// FNV-1a over the config dimensions and every parameter bit; reports
    /// embed this so runs are attributable to an exact checkpoint.
    pub fn fingerprint(&self, cfg: &ModelConfig) -> u64 {
        let mut h = Fnv::new();
        for dim in [
            cfg.n_layers,
            cfg.width,
            cfg.n_heads,
            cfg.vocab_size,
            cfg.patch_dim,
            cfg.max_positions,
        ] {
            h.write_u64(dim as u64);
        }
        h.write_u64(cfg.rope_base.to_bits() as u64);
        for (name, t) in self.named() {
            h.write_bytes(name.as_bytes());
            for &v in t.data() {
                h.write_u64(v.to_bits() as u64);
            }
        }
        h.finish()
    }
}

/// Minimal FNV-1a hasher; enough for fingerprints, not cryptographic.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf29ce484222325)
    }

    pub fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

/// Residual-stream checkpoints of one prompt prefix: layer inputs 0..L plus
/// the final output, with the rotary position of every token.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub n_layers: usize,
    pub width: usize,
    /// Number of cached token positions (the frozen context length).
    pub len: usize,
    pub positions: Vec<i64>,
    pub spans: Option<SpanTable>,
    resid: Arc<Vec<f32>>,
    ledger: Option<PatchLedger>,
}

#[derive(Debug, Clone)]
struct PatchLedger {
    base: Arc<Vec<f32>>,
    applied: Vec<AdditivePatch>,
}

/// A signed additive edit over selected layers and token positions.
#[derive(Debug, Clone)]
pub struct AdditivePatch {
    pub token_positions: Vec<usize>,
    pub layers: Vec<usize>,
    pub sign: f32,
    /// `[layers.len() x token_positions.len() x width]`, added as `sign * v`.
    pub values: Arc<Vec<f32>>,
    /// Identifies the payload (not the sign); equal-fingerprint patches of
    /// opposite sign cancel exactly.
    pub fingerprint: u64,
}

impl ActivationCache {
    pub fn from_parts(
        n_layers: usize,
        width: usize,
        len: usize,
        resid: Vec<f32>,
        positions: Vec<i64>,
        spans: Option<SpanTable>,
    ) -> Self {
        debug_assert_eq!(resid.len(), (n_layers + 1) * len * width);
        debug_assert_eq!(positions.len(), len);
        Self {
            n_layers,
            width,
            len,
            positions,
            spans,
            resid: Arc::new(resid),
            ledger: None,
        }
    }

    /// Residual stream at the input of `layer` (or the final output when
    /// `layer == n_layers`), shape `[len, width]`.
    pub fn checkpoint(&self, layer: usize) -> &[f32] {
        let stride = self.len * self.width;
        &self.resid[layer * stride..(layer + 1) * stride]
    }

    pub fn resid_at(&self, layer: usize, pos: usize) -> &[f32] {
        let stride = self.len * self.width;
        let start = layer * stride + pos * self.width;
        &self.resid[start..start + self.width]
    }

    pub fn resid_raw(&self) -> &[f32] {
        &self.resid
    }

    /// True when both caches share the same underlying buffer (used to prove
    /// a remap touched metadata only).
    pub fn shares_resid_with(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.resid, &other.resid)
    }

    pub fn is_finite(&self) -> bool {
        self.resid.iter().all(|v| v.is_finite())
    }

    /// Same activations, different rotary positions.
    pub fn with_positions(&self, positions: Vec<i64>) -> Self {
        debug_assert_eq!(positions.len(), self.len);
        Self {
            positions,
            resid: Arc::clone(&self.resid),
            ..self.clone()
        }
    }

    /// Copy of this cache with rows `(layer, dst_pos)` overwritten by
    /// `src`'s rows `(layer, src_pos)`. Resets the edit ledger: the result
    /// is a fresh base.
    pub fn with_rows_replaced(
        &self,
        layers: &[usize],
        dst_positions: &[usize],
        src: &Self,
        src_positions: &[usize],
    ) -> Self {
        debug_assert_eq!(dst_positions.len(), src_positions.len());
        let mut resid = (*self.resid).clone();
        let stride = self.len * self.width;
        let src_stride = src.len * src.width;
        for &l in layers {
            for (&d, &s) in dst_positions.iter().zip(src_positions) {
                let dst_start = l * stride + d * self.width;
                let src_start = l * src_stride + s * src.width;
                resid[dst_start..dst_start + self.width]
                    .copy_from_slice(&src.resid[src_start..src_start + self.width]);
            }
        }
        Self {
            resid: Arc::new(resid),
            ledger: None,
            ..self.clone()
        }
    }

    /// Apply a signed additive patch. A patch that exactly negates one
    /// already in the ledger removes it instead, so `+p` then `-p` returns
    /// to the base buffer bit for bit.
    pub fn with_patch(&self, patch: AdditivePatch) -> Self {
        let (base, mut applied) = match &self.ledger {
            Some(l) => (Arc::clone(&l.base), l.applied.clone()),
            None => (Arc::clone(&self.resid), Vec::new()),
        };
        let cancels = |q: &AdditivePatch| {
            q.fingerprint == patch.fingerprint
                && q.sign == -patch.sign
                && q.token_positions == patch.token_positions
                && q.layers == patch.layers
        };
        if let Some(i) = applied.iter().position(cancels) {
            applied.remove(i);
        } else {
            applied.push(patch);
        }
        if applied.is_empty() {
            return Self {
                resid: Arc::clone(&base),
                ledger: None,
                ..self.clone()
            };
        }
        let mut resid = (*base).clone();
        let stride = self.len * self.width;
        for p in &applied {
            let npos = p.token_positions.len();
            for (li, &l) in p.layers.iter().enumerate() {
                for (pi, &pos) in p.token_positions.iter().enumerate() {
                    let dst = l * stride + pos * self.width;
                    let src = (li * npos + pi) * self.width;
                    for c in 0..self.width {
                        resid[dst + c] += p.sign * p.values[src + c];
                    }
                }
            }
        }
        Self {
            resid: Arc::new(resid),
            ledger: Some(PatchLedger { base, applied }),
            ..self.clone()
        }
    }
}
