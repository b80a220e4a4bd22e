//! Procedural generator for the two-object Shapes task.
//!
//! A scene places two objects with distinct shapes and colors into fixed
//! slots of a 96x96 image. The prompt pairs that image with a templated
//! context assigning an item letter to each object by color, then asks which
//! item one object (referred to by shape) contains. Token-index spans of
//! every object, color and item are recorded alongside the prompt so the
//! intervention machinery can address them.
//!
//! Two disjoint vocabularies exist: the evaluation pool and an estimation
//! pool (different shapes, colors and letters) used only for difference
//! vector estimation.

pub mod generate;
pub mod render;
pub mod vocab;

pub use generate::{build_prompt, delta_pair, factorizability_pair, make_instance};
pub use render::{patchify, render_image, Image};
pub use vocab::Vocabulary;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskError {
    DuplicateShape(Shape),
    DuplicateColor(Color),
    DuplicateSlot(Slot),
    UnsupportedRenderSize { size: usize },
    UnknownWord(String),
    UnknownTokenId(u32),
    PoolMismatch,
    PaddingEscapesImage { padding: usize },
    PaddingCrossesSpan { padding: usize },
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateShape(s) => write!(f, "objects share the shape {s:?}"),
            Self::DuplicateColor(c) => write!(f, "objects share the color {c:?}"),
            Self::DuplicateSlot(s) => write!(f, "objects share the slot {s:?}"),
            Self::UnsupportedRenderSize { size } => {
                write!(f, "render size {size} unsupported (expected {})", render::RENDER_SIZE)
            }
            Self::UnknownWord(w) => write!(f, "word not in vocabulary: {w:?}"),
            Self::UnknownTokenId(id) => write!(f, "token id {id} not in vocabulary"),
            Self::PoolMismatch => write!(f, "scene mixes evaluation and estimation vocabulary"),
            Self::PaddingEscapesImage { padding } => {
                write!(f, "padding {padding} escapes the image token block")
            }
            Self::PaddingCrossesSpan { padding } => {
                write!(f, "padding {padding} crosses another span")
            }
        }
    }
}

impl core::error::Error for TaskError {}

/// Which vocabulary partition an instance draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Pool {
    Eval,
    Estimation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Shape {
    Sphere,
    Cube,
    Cone,
    Cylinder,
    Frustum,
    Pyramid,
    Prism,
    Toroid,
}

impl Shape {
    pub const EVAL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cone, Shape::Cylinder];
    pub const ESTIMATION: [Shape; 4] = [Shape::Frustum, Shape::Pyramid, Shape::Prism, Shape::Toroid];

    pub fn of_pool(pool: Pool) -> [Shape; 4] {
        match pool {
            Pool::Eval => Self::EVAL,
            Pool::Estimation => Self::ESTIMATION,
        }
    }

    pub fn pool(self) -> Pool {
        if Self::EVAL.contains(&self) {
            Pool::Eval
        } else {
            Pool::Estimation
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cone => "cone",
            Shape::Cylinder => "cylinder",
            Shape::Frustum => "frustum",
            Shape::Pyramid => "pyramid",
            Shape::Prism => "prism",
            Shape::Toroid => "toroid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Cyan,
    Purple,
    Lime,
    Pink,
    Gold,
    Brown,
    Orange,
    Azure,
}

impl Color {
    pub const EVAL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Cyan,
        Color::Purple,
    ];
    pub const ESTIMATION: [Color; 6] = [
        Color::Lime,
        Color::Pink,
        Color::Gold,
        Color::Brown,
        Color::Orange,
        Color::Azure,
    ];

    pub fn of_pool(pool: Pool) -> [Color; 6] {
        match pool {
            Pool::Eval => Self::EVAL,
            Pool::Estimation => Self::ESTIMATION,
        }
    }

    pub fn pool(self) -> Pool {
        if Self::EVAL.contains(&self) {
            Pool::Eval
        } else {
            Pool::Estimation
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Purple => "purple",
            Color::Lime => "lime",
            Color::Pink => "pink",
            Color::Gold => "gold",
            Color::Brown => "brown",
            Color::Orange => "orange",
            Color::Azure => "azure",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Blue => [0.10, 0.20, 0.85],
            Color::Green => [0.10, 0.70, 0.15],
            Color::Yellow => [0.90, 0.85, 0.10],
            Color::Cyan => [0.10, 0.80, 0.85],
            Color::Purple => [0.55, 0.15, 0.75],
            Color::Lime => [0.55, 0.90, 0.10],
            Color::Pink => [0.95, 0.55, 0.70],
            Color::Gold => [0.85, 0.65, 0.10],
            Color::Brown => [0.45, 0.28, 0.12],
            Color::Orange => [0.95, 0.50, 0.05],
            Color::Azure => [0.25, 0.55, 0.95],
        }
    }
}

/// Fixed placement slot. The context always lists the LEFT object first, so
/// tuple index 0 is LEFT and tuple index 1 is RIGHT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Slot {
    Left,
    Right,
}

/// Which span family an intervention addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Role {
    Object,
    Color,
    Item,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SceneSpec {
    /// Tuple order: index 0 is the first object mentioned in the context.
    pub objects: [ObjectSpec; 2],
    pub render_size: usize,
    pub multi_crop: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let [a, b] = &self.objects;
        if a.shape == b.shape {
            return Err(TaskError::DuplicateShape(a.shape));
        }
        if a.color == b.color {
            return Err(TaskError::DuplicateColor(a.color));
        }
        if a.slot == b.slot {
            return Err(TaskError::DuplicateSlot(a.slot));
        }
        if a.shape.pool() != b.shape.pool()
            || a.color.pool() != b.color.pool()
            || a.shape.pool() != a.color.pool()
        {
            return Err(TaskError::PoolMismatch);
        }
        if self.render_size != render::RENDER_SIZE {
            return Err(TaskError::UnsupportedRenderSize {
                size: self.render_size,
            });
        }
        Ok(())
    }

    pub fn pool(&self) -> Pool {
        self.objects[0].shape.pool()
    }
}

/// Task-level knobs shared by generation, the model and experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TaskConfig {
    pub multi_crop: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { multi_crop: false }
    }
}

/// One image-token rectangle of an object span, local to a view's patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SpanBlock {
    pub view: usize,
    /// Half-open patch-row range in the view grid.
    pub rows: (usize, usize),
    /// Half-open patch-column range in the view grid.
    pub cols: (usize, usize),
}

/// Geometry of one view's token block inside the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ViewGrid {
    pub token_offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ViewGrid {
    pub fn token_at(&self, row: usize, col: usize) -> usize {
        self.token_offset + row * self.cols + col
    }

    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Absolute token-index spans for both tuples of an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SpanTable {
    pub object: [Vec<SpanBlock>; 2],
    pub color: [Vec<usize>; 2],
    pub item: [Vec<usize>; 2],
    pub views: Vec<ViewGrid>,
    /// Prompt length up to the end of the context; question tokens start here.
    pub context_len: usize,
}

impl SpanTable {
    /// Token indices of object `k`, one flat list in view-then-raster order.
    pub fn object_tokens(&self, k: usize) -> Vec<usize> {
        self.object_tokens_padded(k, 0).expect("padding 0 is valid")
    }

    /// Object token indices dilated by a `padding`-patch ring in each view,
    /// clipped at the view boundary.
    ///
    /// Errors if the dilated rectangles of the two objects would intersect:
    /// a ring that wide would corrupt the other object's span.
    pub fn object_tokens_padded(&self, k: usize, padding: usize) -> Result<Vec<usize>, TaskError> {
        let own: Vec<(usize, (usize, usize), (usize, usize))> = self.object[k]
            .iter()
            .map(|b| (b.view, self.dilate(b, padding)))
            .map(|(v, (r, c))| (v, r, c))
            .collect();
        for other in &self.object[1 - k] {
            let (orows, ocols) = self.dilate(other, padding);
            for (view, rows, cols) in &own {
                if *view == other.view
                    && rows.0 < orows.1
                    && orows.0 < rows.1
                    && cols.0 < ocols.1
                    && ocols.0 < cols.1
                {
                    return Err(TaskError::PaddingCrossesSpan { padding });
                }
            }
        }
        let mut tokens = Vec::new();
        for (view, rows, cols) in own {
            let grid = &self.views[view];
            for r in rows.0..rows.1 {
                for c in cols.0..cols.1 {
                    tokens.push(grid.token_at(r, c));
                }
            }
        }
        Ok(tokens)
    }

    fn dilate(&self, b: &SpanBlock, padding: usize) -> ((usize, usize), (usize, usize)) {
        let grid = &self.views[b.view];
        let r0 = b.rows.0.saturating_sub(padding);
        let c0 = b.cols.0.saturating_sub(padding);
        let r1 = (b.rows.1 + padding).min(grid.rows);
        let c1 = (b.cols.1 + padding).min(grid.cols);
        ((r0, r1), (c0, c1))
    }

    /// Token indices of a text-role span widened by `padding` tokens per side,
    /// clipped to the context and stopped at any other span.
    pub fn text_tokens_padded(
        &self,
        role: Role,
        k: usize,
        padding: usize,
    ) -> Result<Vec<usize>, TaskError> {
        let base = match role {
            Role::Color => &self.color[k],
            Role::Item => &self.item[k],
            Role::Object => return Err(TaskError::PaddingCrossesSpan { padding }),
        };
        let text_start = self.views.iter().map(|v| v.token_offset + v.n_tokens()).max().unwrap_or(1);
        let lo = base[0].saturating_sub(padding).max(text_start);
        let hi = (base[base.len() - 1] + 1 + padding).min(self.context_len);
        let mut blocked: Vec<usize> = Vec::new();
        for kk in 0..2 {
            if !(role == Role::Color && kk == k) {
                blocked.extend_from_slice(&self.color[kk]);
            }
            if !(role == Role::Item && kk == k) {
                blocked.extend_from_slice(&self.item[kk]);
            }
        }
        let tokens: Vec<usize> = (lo..hi).collect();
        if tokens.iter().any(|t| blocked.contains(t)) {
            return Err(TaskError::PaddingCrossesSpan { padding });
        }
        Ok(tokens)
    }

    /// Span token indices for any role at the given padding.
    pub fn role_tokens_padded(
        &self,
        role: Role,
        k: usize,
        padding: usize,
    ) -> Result<Vec<usize>, TaskError> {
        match role {
            Role::Object => self.object_tokens_padded(k, padding),
            Role::Color | Role::Item => self.text_tokens_padded(role, k, padding),
        }
    }

    /// All spans, used by invariant checks: `(role, k, token list)`.
    pub fn all_spans(&self) -> Vec<(Role, usize, Vec<usize>)> {
        let mut out = Vec::new();
        for k in 0..2 {
            out.push((Role::Object, k, self.object_tokens(k)));
            out.push((Role::Color, k, self.color[k].clone()));
            out.push((Role::Item, k, self.item[k].clone()));
        }
        out
    }
}

/// A fully rendered, tokenized task instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ShapesInstance {
    pub seed: u64,
    pub scene: SceneSpec,
    pub image: Image,
    pub tokens: Vec<u32>,
    pub spans: SpanTable,
    pub queried_k: usize,
    pub answer_item_token: u32,
}

impl ShapesInstance {
    /// Item token bound to tuple `k` in the context.
    pub fn item_token(&self, k: usize) -> u32 {
        self.tokens[self.spans.item[k][0]]
    }

    /// Prompt tokens after the context (question plus answer marker).
    pub fn question_tokens(&self) -> &[u32] {
        &self.tokens[self.spans.context_len..]
    }

    pub fn context_tokens(&self) -> &[u32] {
        &self.tokens[..self.spans.context_len]
    }
}
