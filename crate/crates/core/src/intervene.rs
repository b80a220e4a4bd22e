//! Residual-stream surgery: context caching, activation splices between
//! contexts, rotary position remapping, and mean binding difference-vector
//! estimation and application.
//!
//! Every operation takes an [`ActivationCache`] and returns a new one;
//! caches are never mutated in place. A splice copies the source values at
//! matching within-span offsets (view by view for object spans). A remap
//! changes only the position metadata. Mean interventions go through the
//! cache's additive-patch ledger, so applying a vector and then its
//! negation restores the original buffer exactly.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{
    extract_cache, full_forward, ActivationCache, AdditivePatch, Fnv, ModelConfig, ModelError,
    ModelParams,
};
use crate::rng::Pcg32;
use crate::shapes::generate::{delta_pair, DeltaMatch};
use crate::shapes::{Role, ShapesInstance, TaskConfig, TaskError};

#[derive(Debug, Clone, PartialEq)]
pub enum InterveneError {
    Model(ModelError),
    Task(TaskError),
    MissingSpans,
    SpanLengthMismatch { dst: usize, src: usize },
    StructuralMismatch(&'static str),
    LayerOutOfRange { layer: usize, n_layers: usize },
    DuplicateRemapTarget { position: i64 },
    NegativeRemapTarget { position: i64 },
    RemapIndexOutOfRange { index: usize, len: usize },
    TooFewPairs { got: usize, minimum: usize },
    DeltaShapeMismatch(&'static str),
}

impl fmt::Display for InterveneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::Task(e) => write!(f, "task error: {e}"),
            Self::MissingSpans => write!(f, "cache carries no span table"),
            Self::SpanLengthMismatch { dst, src } => {
                write!(f, "span length mismatch: dst {dst}, src {src}")
            }
            Self::StructuralMismatch(m) => write!(f, "incompatible caches: {m}"),
            Self::LayerOutOfRange { layer, n_layers } => {
                write!(f, "layer {layer} out of range (model has {n_layers})")
            }
            Self::DuplicateRemapTarget { position } => {
                write!(f, "duplicate remap target position {position}")
            }
            Self::NegativeRemapTarget { position } => {
                write!(f, "negative remap target position {position}")
            }
            Self::RemapIndexOutOfRange { index, len } => {
                write!(f, "remap token index {index} out of range for cache of {len}")
            }
            Self::TooFewPairs { got, minimum } => {
                write!(f, "only {got} estimation pairs, need at least {minimum}")
            }
            Self::DeltaShapeMismatch(m) => write!(f, "delta shape mismatch: {m}"),
        }
    }
}

impl core::error::Error for InterveneError {}

impl From<ModelError> for InterveneError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<TaskError> for InterveneError {
    fn from(e: TaskError) -> Self {
        Self::Task(e)
    }
}

/// Which layers an intervention touches. `All` means every layer input
/// `0..n_layers`; the final-output checkpoint is never edited (frozen
/// attention never reads it).
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerSet {
    All,
    Subset(Vec<usize>),
}

impl LayerSet {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>, InterveneError> {
        match self {
            Self::All => Ok((0..n_layers).collect()),
            Self::Subset(layers) => {
                for &l in layers {
                    if l >= n_layers {
                        return Err(InterveneError::LayerOutOfRange { layer: l, n_layers });
                    }
                }
                Ok(layers.clone())
            }
        }
    }
}

/// A request to replace one role span of tuple `k` with another context's.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpliceRequest {
    pub role: Role,
    pub k: usize,
    /// Patch-ring width for OBJECT spans, token count per side for text
    /// spans.
    pub padding: usize,
    pub layers: LayerSet,
}

impl SpliceRequest {
    pub fn new(role: Role, k: usize) -> Self {
        Self {
            role,
            k,
            padding: default_padding(role),
            layers: LayerSet::All,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_layers(mut self, layers: LayerSet) -> Self {
        self.layers = layers;
        self
    }
}

/// Paper-style default: a one-patch ring around object blocks, no padding
/// on text spans.
pub fn default_padding(role: Role) -> usize {
    match role {
        Role::Object => 1,
        Role::Color | Role::Item => 0,
    }
}

/// Run the model over the context prefix only (image plus context text) and
/// keep the residual checkpoints with the instance's span table.
pub fn cache_context(
    params: &ModelParams,
    cfg: &ModelConfig,
    instance: &ShapesInstance,
) -> Result<ActivationCache, InterveneError> {
    let mut ctx = instance.clone();
    ctx.tokens.truncate(instance.spans.context_len);
    let (g, _, out) = full_forward(params, cfg, &ctx, false)?;
    let positions: Vec<i64> = (0..ctx.tokens.len() as i64).collect();
    Ok(extract_cache(
        &g,
        &out,
        cfg,
        &positions,
        Some(instance.spans.clone()),
    ))
}

fn require_spans(cache: &ActivationCache) -> Result<&crate::shapes::SpanTable, InterveneError> {
    cache.spans.as_ref().ok_or(InterveneError::MissingSpans)
}

fn check_compatible(dst: &ActivationCache, src: &ActivationCache) -> Result<(), InterveneError> {
    if dst.n_layers != src.n_layers || dst.width != src.width {
        return Err(InterveneError::StructuralMismatch("layer count or width"));
    }
    if dst.len != src.len {
        return Err(InterveneError::StructuralMismatch("context length"));
    }
    Ok(())
}

/// Replace the (padded) span of `req.role`/`req.k` in `dst` with `src`'s
/// values at the corresponding span positions, at every requested layer.
pub fn splice(
    dst: &ActivationCache,
    src: &ActivationCache,
    req: &SpliceRequest,
) -> Result<ActivationCache, InterveneError> {
    check_compatible(dst, src)?;
    let dst_spans = require_spans(dst)?;
    let src_spans = require_spans(src)?;
    let dst_tokens = dst_spans.role_tokens_padded(req.role, req.k, req.padding)?;
    let src_tokens = src_spans.role_tokens_padded(req.role, req.k, req.padding)?;
    if dst_tokens.len() != src_tokens.len() {
        return Err(InterveneError::SpanLengthMismatch {
            dst: dst_tokens.len(),
            src: src_tokens.len(),
        });
    }
    let layers = req.layers.resolve(dst.n_layers)?;
    Ok(dst.with_rows_replaced(&layers, &dst_tokens, src, &src_tokens))
}

/// Move selected tokens to new rotary positions. Only position metadata
/// changes; the activation buffer is shared with the input cache.
///
/// Targets must be non-negative and distinct among the remapped tokens
/// (collisions with untouched tokens are allowed: two tokens may share a
/// rotary phase).
pub fn remap_positions(
    cache: &ActivationCache,
    mapping: &[(usize, i64)],
) -> Result<ActivationCache, InterveneError> {
    let mut positions = cache.positions.clone();
    for &(idx, target) in mapping {
        if idx >= cache.len {
            return Err(InterveneError::RemapIndexOutOfRange {
                index: idx,
                len: cache.len,
            });
        }
        if target < 0 {
            return Err(InterveneError::NegativeRemapTarget { position: target });
        }
        positions[idx] = target;
    }
    let mut targets: Vec<i64> = mapping.iter().map(|&(_, t)| t).collect();
    targets.sort_unstable();
    for w in targets.windows(2) {
        if w[0] == w[1] {
            return Err(InterveneError::DuplicateRemapTarget { position: w[0] });
        }
    }
    Ok(cache.with_positions(positions))
}

/// Mapping that shifts tuple 0's span of `role` by `+offset` and tuple 1's
/// by `-offset`.
pub fn offset_mapping(
    cache: &ActivationCache,
    role: Role,
    offset: i64,
) -> Result<Vec<(usize, i64)>, InterveneError> {
    let spans = require_spans(cache)?;
    let mut mapping = Vec::new();
    for (k, delta) in [(0usize, offset), (1usize, -offset)] {
        for t in spans.role_tokens_padded(role, k, 0)? {
            mapping.push((t, cache.positions[t] + delta));
        }
    }
    Ok(mapping)
}

/// Mapping that exchanges the positions of tuple 0's and tuple 1's spans of
/// `role`, matched by within-span offset (and view for object spans).
pub fn swap_mapping(
    cache: &ActivationCache,
    role: Role,
) -> Result<Vec<(usize, i64)>, InterveneError> {
    let spans = require_spans(cache)?;
    let a = spans.role_tokens_padded(role, 0, 0)?;
    let b = spans.role_tokens_padded(role, 1, 0)?;
    if a.len() != b.len() {
        return Err(InterveneError::SpanLengthMismatch {
            dst: a.len(),
            src: b.len(),
        });
    }
    let mut mapping = Vec::with_capacity(a.len() * 2);
    for (&ta, &tb) in a.iter().zip(&b) {
        mapping.push((ta, cache.positions[tb]));
        mapping.push((tb, cache.positions[ta]));
    }
    Ok(mapping)
}

/// The position increment at which [`offset_mapping`] equals a full swap.
pub fn swap_offset(cache: &ActivationCache, role: Role) -> Result<i64, InterveneError> {
    let spans = require_spans(cache)?;
    let a = spans.role_tokens_padded(role, 0, 0)?;
    let b = spans.role_tokens_padded(role, 1, 0)?;
    Ok(cache.positions[b[0]] - cache.positions[a[0]])
}

/// Estimated binding difference vectors for one role: per layer, per
/// within-span offset.
#[derive(Debug, Clone)]
pub struct DeltaVectors {
    pub role: Role,
    pub n_layers: usize,
    pub span_len: usize,
    pub width: usize,
    /// Padding the span was dilated by during estimation (object role).
    pub padding: usize,
    pub n_pairs: usize,
    /// `[n_layers x span_len x width]`.
    pub data: Vec<f32>,
    /// Euclidean norm of each layer's slice.
    pub norms_per_layer: Vec<f32>,
    /// Seeds of the estimation pairs, for provenance.
    pub pair_seeds: Vec<u64>,
}

impl DeltaVectors {
    pub fn slice(&self, layer: usize) -> &[f32] {
        let stride = self.span_len * self.width;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    pub fn offset_vector(&self, layer: usize, offset: usize) -> &[f32] {
        let start = (layer * self.span_len + offset) * self.width;
        &self.data[start..start + self.width]
    }

    fn compute_norms(data: &[f32], n_layers: usize, stride: usize) -> Vec<f32> {
        (0..n_layers)
            .map(|l| {
                let s: f64 = data[l * stride..(l + 1) * stride]
                    .iter()
                    .map(|&v| v as f64 * v as f64)
                    .sum();
                crate::mathf::sqrt64(s) as f32
            })
            .collect()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.role as u64);
        h.write_u64(self.span_len as u64);
        h.write_u64(self.padding as u64);
        for &v in &self.data {
            h.write_u64(v.to_bits() as u64);
        }
        h.finish()
    }

    /// Mean-pooled variant: every within-span offset carries the average
    /// vector of its layer.
    pub fn mean_pooled(&self) -> Self {
        let mut data = vec![0.0f32; self.data.len()];
        let stride = self.span_len * self.width;
        for l in 0..self.n_layers {
            let src = &self.data[l * stride..(l + 1) * stride];
            let mut mean = vec![0.0f32; self.width];
            for o in 0..self.span_len {
                for c in 0..self.width {
                    mean[c] += src[o * self.width + c];
                }
            }
            let inv = 1.0 / self.span_len as f32;
            for v in mean.iter_mut() {
                *v *= inv;
            }
            for o in 0..self.span_len {
                data[l * stride + o * self.width..l * stride + (o + 1) * self.width]
                    .copy_from_slice(&mean);
            }
        }
        Self {
            norms_per_layer: Self::compute_norms(&data, self.n_layers, stride),
            data,
            ..self.clone()
        }
    }
}

pub const DEFAULT_MIN_PAIRS: usize = 50;

/// The activation difference contributed by one estimation pair:
/// `Z_B[tuple 1] - Z_A[tuple 0]` at matching within-span offsets,
/// `[n_layers x span_len x width]`.
pub fn delta_pair_diff(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    seed: u64,
    role: Role,
    matching: DeltaMatch,
    padding: usize,
) -> Result<(usize, Vec<f32>), InterveneError> {
    let (a, b) = delta_pair(seed, role, matching, task);
    let (ca, cb) = (
        cache_context(params, cfg, &a)?,
        cache_context(params, cfg, &b)?,
    );
    let ta = a.spans.role_tokens_padded(role, 0, padding)?;
    let tb = b.spans.role_tokens_padded(role, 1, padding)?;
    if ta.len() != tb.len() {
        return Err(InterveneError::SpanLengthMismatch {
            dst: ta.len(),
            src: tb.len(),
        });
    }
    let span_len = ta.len();
    let mut diff = Vec::with_capacity(cfg.n_layers * span_len * cfg.width);
    for l in 0..cfg.n_layers {
        for (&pa, &pb) in ta.iter().zip(&tb) {
            let ra = ca.resid_at(l, pa);
            let rb = cb.resid_at(l, pb);
            diff.extend(rb.iter().zip(ra).map(|(&xb, &xa)| xb - xa));
        }
    }
    Ok((span_len, diff))
}

/// Average per-pair differences (in the given order, f64 accumulation) into
/// the final vectors. Parallel callers shard [`delta_pair_diff`] and pass
/// results here in seed order, which reproduces the serial estimate bit for
/// bit.
pub fn deltas_from_diffs(
    cfg: &ModelConfig,
    role: Role,
    padding: usize,
    pair_seeds: &[u64],
    diffs: &[(usize, Vec<f32>)],
) -> Result<DeltaVectors, InterveneError> {
    let span_len = diffs.first().map(|(s, _)| *s).unwrap_or(0);
    let stride = span_len * cfg.width;
    let mut acc = vec![0.0f64; cfg.n_layers * stride];
    for (s, d) in diffs {
        if *s != span_len || d.len() != acc.len() {
            return Err(InterveneError::DeltaShapeMismatch("pair diff size"));
        }
        for (a, &v) in acc.iter_mut().zip(d) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / diffs.len().max(1) as f64;
    let data: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
    Ok(DeltaVectors {
        role,
        n_layers: cfg.n_layers,
        span_len,
        width: cfg.width,
        padding,
        n_pairs: diffs.len(),
        norms_per_layer: DeltaVectors::compute_norms(&data, cfg.n_layers, stride),
        data,
        pair_seeds: pair_seeds.to_vec(),
    })
}

/// Estimate `Delta_role = mean(Z_B[tuple 1] - Z_A[tuple 0])` over
/// estimation-pool pairs where the same content fills tuple 0 of A and
/// tuple 1 of B. Content cancels in the mean, leaving the binding
/// difference.
pub fn estimate_deltas(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    pair_seeds: &[u64],
    role: Role,
    matching: DeltaMatch,
    padding: usize,
    min_pairs: usize,
) -> Result<DeltaVectors, InterveneError> {
    if pair_seeds.len() < min_pairs {
        return Err(InterveneError::TooFewPairs {
            got: pair_seeds.len(),
            minimum: min_pairs,
        });
    }
    let diffs: Result<Vec<_>, _> = pair_seeds
        .iter()
        .map(|&s| delta_pair_diff(params, cfg, task, s, role, matching, padding))
        .collect();
    deltas_from_diffs(cfg, role, padding, pair_seeds, &diffs?)
}

/// Sign convention for mean interventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SignScheme {
    /// `+Delta` on tuple 0, `-Delta` on tuple 1 (the binding swap).
    Forward,
    /// The exact inverse.
    Negated,
}

impl SignScheme {
    fn signs(self) -> [f32; 2] {
        match self {
            Self::Forward => [1.0, -1.0],
            Self::Negated => [-1.0, 1.0],
        }
    }
}

/// Add `+Delta` to tuple 0's span and `-Delta` to tuple 1's span for each
/// role, at every layer the deltas carry.
pub fn apply_mean_intervention(
    cache: &ActivationCache,
    deltas: &[&DeltaVectors],
    sign_scheme: SignScheme,
) -> Result<ActivationCache, InterveneError> {
    let spans = require_spans(cache)?.clone();
    let mut out = cache.clone();
    let signs = sign_scheme.signs();
    for dv in deltas {
        if dv.n_layers != cache.n_layers || dv.width != cache.width {
            return Err(InterveneError::DeltaShapeMismatch("layers or width"));
        }
        let layers: Vec<usize> = (0..dv.n_layers).collect();
        let fingerprint = dv.fingerprint();
        for k in 0..2 {
            let tokens = spans.role_tokens_padded(dv.role, k, dv.padding)?;
            if tokens.len() != dv.span_len {
                return Err(InterveneError::SpanLengthMismatch {
                    dst: tokens.len(),
                    src: dv.span_len,
                });
            }
            let mut h = Fnv::new();
            h.write_u64(fingerprint);
            h.write_u64(k as u64);
            out = out.with_patch(AdditivePatch {
                token_positions: tokens,
                layers: layers.clone(),
                sign: signs[k],
                values: Arc::new(dv.data.clone()),
                fingerprint: h.finish(),
            });
        }
    }
    Ok(out)
}

/// Isotropically random vectors rescaled to the per-(layer, offset) norms
/// of `deltas` — the magnitude-matched control.
pub fn random_control_vectors(deltas: &DeltaVectors, seed: u64) -> DeltaVectors {
    let mut rng = Pcg32::new(seed, 0xD14);
    let mut data = vec![0.0f32; deltas.data.len()];
    for l in 0..deltas.n_layers {
        for o in 0..deltas.span_len {
            let src = deltas.offset_vector(l, o);
            let norm2: f64 = src.iter().map(|&v| v as f64 * v as f64).sum();
            let target = crate::mathf::sqrt64(norm2);
            let mut dir: Vec<f64> = (0..deltas.width).map(|_| rng.gauss() as f64).collect();
            let dn: f64 = crate::mathf::sqrt64(dir.iter().map(|v| v * v).sum());
            if dn > 0.0 {
                let scale = target / dn;
                for v in dir.iter_mut() {
                    *v *= scale;
                }
            }
            let start = (l * deltas.span_len + o) * deltas.width;
            for (i, v) in dir.into_iter().enumerate() {
                data[start + i] = v as f32;
            }
        }
    }
    let stride = deltas.span_len * deltas.width;
    DeltaVectors {
        norms_per_layer: DeltaVectors::compute_norms(&data, deltas.n_layers, stride),
        data,
        pair_seeds: vec![seed],
        ..deltas.clone()
    }
}

/// Cosine similarity between two delta estimates at one layer.
pub fn layer_cosine(a: &DeltaVectors, b: &DeltaVectors, layer: usize) -> f32 {
    let (xa, xb) = (a.slice(layer), b.slice(layer));
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in xa.iter().zip(xb) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (crate::mathf::sqrt64(na) * crate::mathf::sqrt64(nb))) as f32
}
