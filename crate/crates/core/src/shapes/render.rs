//! Deterministic 2D rasterization of scenes and patch extraction.
//!
//! Geometry is fixed: a 96x96 image split into 12x12 patches of 8x8 pixels.
//! The LEFT slot is the 3x3 patch block in the top-left corner, the RIGHT
//! slot the 3x3 block in the bottom-right corner, which leaves room for the
//! full padding sweep (rings of width 0..=3) without the two dilated blocks
//! ever meeting. Each object is drawn as a colored glyph on a slightly
//! darker backing plate that fills its whole block, so every patch of a slot
//! differs from the background render.
//!
//! Multi-crop mode appends two half-resolution 64x64 crops (top-left and
//! bottom-right, overlapping in the middle), giving each object a second
//! token block in exactly one crop.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::{SceneSpec, Shape, Slot, SpanBlock, TaskError, ViewGrid};

pub const RENDER_SIZE: usize = 96;
pub const PATCH: usize = 8;
pub const GRID: usize = RENDER_SIZE / PATCH;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const BASE_TOKENS: usize = GRID * GRID;

/// Size of one slot block in patches.
pub const BLOCK: usize = 3;

const BACKGROUND: f32 = 0.5;
const PLATE: f32 = 0.42;

/// Crop windows: `(x0, y0)` of a 64x64 window, downsampled 2x to 32x32.
pub const CROP_WINDOWS: [(usize, usize); 2] = [(0, 0), (32, 32)];
pub const CROP_WINDOW_SIZE: usize = 64;
pub const CROP_GRID: usize = CROP_WINDOW_SIZE / 2 / PATCH;
pub const CROP_TOKENS: usize = CROP_GRID * CROP_GRID;

/// Row-major H x W x 3 pixel array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Patch-block position of a slot in the base grid, `(row0, col0)`.
pub fn slot_block(slot: Slot) -> (usize, usize) {
    match slot {
        Slot::Left => (0, 0),
        Slot::Right => (GRID - BLOCK, GRID - BLOCK),
    }
}

/// Which crop (0 or 1) contains a slot, and the object's patch block there.
pub fn slot_crop_block(slot: Slot) -> (usize, (usize, usize), (usize, usize)) {
    match slot {
        Slot::Left => (0, (0, 2), (0, 2)),
        Slot::Right => (1, (2, 4), (2, 4)),
    }
}

/// Number of image tokens in the prompt for the given crop setting.
pub fn n_image_tokens(multi_crop: bool) -> usize {
    if multi_crop {
        BASE_TOKENS + 2 * CROP_TOKENS
    } else {
        BASE_TOKENS
    }
}

/// View grids in prompt order (base first, then crops when enabled).
/// Token offsets start at 1: position 0 is the BOS token.
pub fn view_grids(multi_crop: bool) -> Vec<ViewGrid> {
    let mut views = vec![ViewGrid {
        token_offset: 1,
        rows: GRID,
        cols: GRID,
    }];
    if multi_crop {
        for v in 0..2 {
            views.push(ViewGrid {
                token_offset: 1 + BASE_TOKENS + v * CROP_TOKENS,
                rows: CROP_GRID,
                cols: CROP_GRID,
            });
        }
    }
    views
}

/// Span blocks of the object in `slot`, one per view.
pub fn object_span_blocks(slot: Slot, multi_crop: bool) -> Vec<SpanBlock> {
    let (r0, c0) = slot_block(slot);
    let mut blocks = vec![SpanBlock {
        view: 0,
        rows: (r0, r0 + BLOCK),
        cols: (c0, c0 + BLOCK),
    }];
    if multi_crop {
        let (crop, rows, cols) = slot_crop_block(slot);
        blocks.push(SpanBlock {
            view: crop + 1,
            rows,
            cols,
        });
    }
    blocks
}

fn glyph_hit(shape: Shape, dx: f32, dy: f32) -> bool {
    match shape {
        Shape::Sphere => dx * dx + dy * dy <= 100.0,
        Shape::Cube => dx.abs() <= 9.0 && dy.abs() <= 9.0,
        Shape::Cone => dy >= -9.5 && dy <= 9.5 && dx.abs() <= 10.0 * (dy + 9.5) / 19.0,
        Shape::Cylinder => {
            (dx.abs() <= 6.0 && dy.abs() <= 5.0)
                || (dx * dx + (dy.abs() - 5.0) * (dy.abs() - 5.0) <= 36.0 && dy.abs() > 5.0)
        }
        Shape::Frustum => dy >= -8.0 && dy <= 8.0 && dx.abs() <= 4.0 + 6.0 * (dy + 8.0) / 16.0,
        Shape::Pyramid => dx.abs() + dy.abs() <= 10.0,
        Shape::Prism => dy.abs() <= 8.66 && dx.abs() <= 10.0 - 0.577 * dy.abs(),
        Shape::Toroid => {
            let r2 = dx * dx + dy * dy;
            (36.0..=100.0).contains(&r2)
        }
    }
}

/// Background-only render (both slots empty).
pub fn render_background() -> Image {
    Image::filled(RENDER_SIZE, RENDER_SIZE, BACKGROUND)
}

/// Rasterize a validated scene into the base 96x96 image.
pub fn render_image(spec: &SceneSpec) -> Result<Image, TaskError> {
    spec.validate()?;
    let mut img = render_background();
    for obj in &spec.objects {
        let (br, bc) = slot_block(obj.slot);
        let (y0, x0) = (br * PATCH, bc * PATCH);
        let side = BLOCK * PATCH;
        let center = side as f32 / 2.0 - 0.5;
        let rgb = obj.color.rgb();
        for py in 0..side {
            for px in 0..side {
                let dx = px as f32 - center;
                let dy = py as f32 - center;
                let color = if glyph_hit(obj.shape, dx, dy) {
                    rgb
                } else {
                    [PLATE; 3]
                };
                img.put(y0 + py, x0 + px, color);
            }
        }
    }
    Ok(img)
}

/// One half-resolution crop view (index 0 or 1) of a base image.
pub fn crop_view(image: &Image, crop: usize) -> Image {
    let (x0, y0) = CROP_WINDOWS[crop];
    let side = CROP_WINDOW_SIZE / 2;
    let mut out = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0f32; 3];
            for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = image.get(y0 + 2 * y + sy, x0 + 2 * x + sx);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            out.put(y, x, [acc[0] * 0.25, acc[1] * 0.25, acc[2] * 0.25]);
        }
    }
    out
}

fn patch_rows(image: &Image, out: &mut Vec<f32>) {
    let grid_r = image.height / PATCH;
    let grid_c = image.width / PATCH;
    for pr in 0..grid_r {
        for pc in 0..grid_c {
            for y in 0..PATCH {
                let row = pr * PATCH + y;
                let start = (row * image.width + pc * PATCH) * 3;
                out.extend_from_slice(&image.data[start..start + PATCH * 3]);
            }
        }
    }
}

/// Flatten an image into patch rows `[n_tokens, PATCH_DIM]` in prompt order:
/// base view patches, then each crop's patches when `multi_crop` is set.
pub fn patchify(image: &Image, multi_crop: bool) -> Vec<f32> {
    let mut out = Vec::with_capacity(n_image_tokens(multi_crop) * PATCH_DIM);
    patch_rows(image, &mut out);
    if multi_crop {
        for crop in 0..2 {
            let view = crop_view(image, crop);
            patch_rows(&view, &mut out);
        }
    }
    out
}
