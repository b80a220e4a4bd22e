//! Seeded instance construction and the paired samplers used by the
//! intervention experiments.

use alloc::vec;
use alloc::vec::Vec;

use super::render::{self, n_image_tokens, render_image};
use super::vocab::{Vocabulary, N_ITEMS};
use super::{
    Color, ObjectSpec, Pool, Role, SceneSpec, ShapesInstance, Slot, SpanTable, TaskConfig,
    TaskError,
};
use crate::rng::Pcg32;

/// Tokens in one context sentence: `the <color> object contains item <X> .`
const SENTENCE_LEN: usize = 7;

/// Stream selectors keep the samplers statistically independent even when
/// they share a seed.
fn rng_for(seed: u64, pool: Pool, cfg: &TaskConfig, salt: u64) -> Pcg32 {
    let stream =
        0x51AB + ((pool == Pool::Estimation) as u64) * 2 + (cfg.multi_crop as u64) + salt * 64;
    Pcg32::new(seed, stream)
}

/// Build the full prompt for a scene: `[BOS][image][context][question][ANS]`.
///
/// Returns the token sequence and the span table. `item_idx` are the two
/// item-letter indices bound to tuples 0 and 1; `queried_k` selects which
/// object's shape appears in the question.
pub fn build_prompt(
    scene: &SceneSpec,
    item_idx: [usize; 2],
    queried_k: usize,
) -> Result<(Vec<u32>, SpanTable), TaskError> {
    scene.validate()?;
    let vocab = Vocabulary::standard();
    let pool = scene.pool();
    let n_img = n_image_tokens(scene.multi_crop);

    let mut tokens = Vec::with_capacity(1 + n_img + 2 * SENTENCE_LEN + 7);
    tokens.push(vocab.bos());
    tokens.extend(core::iter::repeat(vocab.img()).take(n_img));

    let mut color_spans = [Vec::new(), Vec::new()];
    let mut item_spans = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let base = tokens.len();
        tokens.push(vocab.id("the").unwrap());
        tokens.push(vocab.color_token(scene.objects[k].color));
        tokens.push(vocab.id("object").unwrap());
        tokens.push(vocab.id("contains").unwrap());
        tokens.push(vocab.id("item").unwrap());
        tokens.push(vocab.item_token(pool, item_idx[k]));
        tokens.push(vocab.id(".").unwrap());
        color_spans[k] = vec![base + 1];
        item_spans[k] = vec![base + 5];
    }
    let context_len = tokens.len();

    tokens.push(vocab.id("what").unwrap());
    tokens.push(vocab.id("does").unwrap());
    tokens.push(vocab.id("the").unwrap());
    tokens.push(vocab.shape_token(scene.objects[queried_k].shape));
    tokens.push(vocab.id("contain").unwrap());
    tokens.push(vocab.id("?").unwrap());
    tokens.push(vocab.ans());

    let spans = SpanTable {
        object: [
            render::object_span_blocks(scene.objects[0].slot, scene.multi_crop),
            render::object_span_blocks(scene.objects[1].slot, scene.multi_crop),
        ],
        color: color_spans,
        item: item_spans,
        views: render::view_grids(scene.multi_crop),
        context_len,
    };
    Ok((tokens, spans))
}

fn assemble(
    seed: u64,
    pool: Pool,
    cfg: &TaskConfig,
    shapes: [super::Shape; 2],
    colors: [Color; 2],
    items: [usize; 2],
    queried_k: usize,
) -> ShapesInstance {
    let scene = SceneSpec {
        objects: [
            ObjectSpec {
                shape: shapes[0],
                color: colors[0],
                slot: Slot::Left,
            },
            ObjectSpec {
                shape: shapes[1],
                color: colors[1],
                slot: Slot::Right,
            },
        ],
        render_size: render::RENDER_SIZE,
        multi_crop: cfg.multi_crop,
    };
    let image = render_image(&scene).expect("generated scenes satisfy the invariants");
    let (tokens, spans) = build_prompt(&scene, items, queried_k).expect("template fits vocab");
    let vocab = Vocabulary::standard();
    ShapesInstance {
        seed,
        scene,
        image,
        tokens,
        spans,
        queried_k,
        answer_item_token: vocab.item_token(pool, items[queried_k]),
    }
}

/// Fully specified instance construction, for controlled comparisons
/// (e.g. two contexts differing in exactly one attribute).
///
/// `shapes`/`colors` index into the pool's shape and color lists, `items`
/// into the item alphabet.
pub fn make_custom_instance(
    pool: Pool,
    shape_idx: [usize; 2],
    color_idx: [usize; 2],
    item_idx: [usize; 2],
    queried_k: usize,
    cfg: &TaskConfig,
) -> ShapesInstance {
    let shapes = super::Shape::of_pool(pool);
    let colors = Color::of_pool(pool);
    assemble(
        0,
        pool,
        cfg,
        [shapes[shape_idx[0]], shapes[shape_idx[1]]],
        [colors[color_idx[0]], colors[color_idx[1]]],
        item_idx,
        queried_k,
    )
}

/// Seeded sampling of one instance from the chosen vocabulary pool.
///
/// Shapes and colors are drawn without replacement, items are two distinct
/// letters, and the queried tuple is a fair coin.
pub fn make_instance(seed: u64, pool: Pool, cfg: &TaskConfig) -> ShapesInstance {
    let mut rng = rng_for(seed, pool, cfg, 0);
    let shape_pool = super::Shape::of_pool(pool);
    let color_pool = Color::of_pool(pool);
    let (s0, s1) = rng.two_distinct(shape_pool.len());
    let (c0, c1) = rng.two_distinct(color_pool.len());
    let (i0, i1) = rng.two_distinct(N_ITEMS);
    let queried_k = rng.coin() as usize;
    assemble(
        seed,
        pool,
        cfg,
        [shape_pool[s0], shape_pool[s1]],
        [color_pool[c0], color_pool[c1]],
        [i0, i1],
        queried_k,
    )
}

/// A pair of evaluation-pool contexts sharing no shape, color or item,
/// as the factorizability experiment requires.
pub fn factorizability_pair(seed: u64, cfg: &TaskConfig) -> (ShapesInstance, ShapesInstance) {
    let mut rng = rng_for(seed, Pool::Eval, cfg, 1);
    // Permute all four shapes: first two to context c, other two to c'.
    let mut shape_order: Vec<usize> = (0..4).collect();
    for i in (1..4).rev() {
        let j = rng.below(i + 1);
        shape_order.swap(i, j);
    }
    let mut color_order: Vec<usize> = (0..6).collect();
    for i in (1..6).rev() {
        let j = rng.below(i + 1);
        color_order.swap(i, j);
    }
    let mut item_order: Vec<usize> = (0..N_ITEMS).collect();
    for i in (1..N_ITEMS).rev() {
        let j = rng.below(i + 1);
        item_order.swap(i, j);
    }
    let q0 = rng.coin() as usize;
    let q1 = rng.coin() as usize;
    let shapes = super::Shape::EVAL;
    let colors = Color::EVAL;
    let a = assemble(
        seed,
        Pool::Eval,
        cfg,
        [shapes[shape_order[0]], shapes[shape_order[1]]],
        [colors[color_order[0]], colors[color_order[1]]],
        [item_order[0], item_order[1]],
        q0,
    );
    let b = assemble(
        seed,
        Pool::Eval,
        cfg,
        [shapes[shape_order[2]], shapes[shape_order[3]]],
        [colors[color_order[2]], colors[color_order[3]]],
        [item_order[2], item_order[3]],
        q1,
    );
    (a, b)
}

/// How the shared content of a difference-vector pair is matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMatch {
    /// Match on the full role content (shape+color object, color word, or
    /// item letter depending on the role).
    Full,
    /// Objects matched on color only; shapes differ. Content no longer
    /// cancels per pair, only in the mean.
    ColorOnly,
}

/// An estimation-pool pair `(A, B)` where the same content is tuple 0 of `A`
/// and tuple 1 of `B`, for estimating binding difference vectors.
pub fn delta_pair(
    seed: u64,
    role: Role,
    matching: DeltaMatch,
    cfg: &TaskConfig,
) -> (ShapesInstance, ShapesInstance) {
    let pool = Pool::Estimation;
    let mut rng = rng_for(seed, pool, cfg, 2 + role as u64);
    let shapes = super::Shape::ESTIMATION;
    let colors = Color::ESTIMATION;

    // Independent draws for both scenes, then overwrite the matched content.
    let (sa0, sa1) = rng.two_distinct(4);
    let (sb0, sb1) = rng.two_distinct(4);
    let (ca0, ca1) = rng.two_distinct(6);
    let (cb0, cb1) = rng.two_distinct(6);
    let (ia0, ia1) = rng.two_distinct(N_ITEMS);
    let (ib0, ib1) = rng.two_distinct(N_ITEMS);
    let (sa, mut sb) = ([sa0, sa1], [sb0, sb1]);
    let (ca, mut cb) = ([ca0, ca1], [cb0, cb1]);
    let (ia, mut ib) = ([ia0, ia1], [ib0, ib1]);

    match role {
        Role::Object => {
            // Same object appears as tuple 0 of A and tuple 1 of B.
            match matching {
                DeltaMatch::Full => {
                    sb[1] = sa[0];
                    if sb[0] == sb[1] {
                        sb[0] = (sb[1] + 1 + rng.below(3)) % 4;
                    }
                }
                DeltaMatch::ColorOnly => {}
            }
            cb[1] = ca[0];
            if cb[0] == cb[1] {
                cb[0] = (cb[1] + 1 + rng.below(5)) % 6;
            }
        }
        Role::Color => {
            cb[1] = ca[0];
            if cb[0] == cb[1] {
                cb[0] = (cb[1] + 1 + rng.below(5)) % 6;
            }
        }
        Role::Item => {
            ib[1] = ia[0];
            if ib[0] == ib[1] {
                ib[0] = (ib[1] + 1 + rng.below(N_ITEMS - 1)) % N_ITEMS;
            }
        }
    }

    let qa = rng.coin() as usize;
    let qb = rng.coin() as usize;
    let a = assemble(
        seed,
        pool,
        cfg,
        [shapes[sa[0]], shapes[sa[1]]],
        [colors[ca[0]], colors[ca[1]]],
        ia,
        qa,
    );
    let b = assemble(
        seed,
        pool,
        cfg,
        [shapes[sb[0]], shapes[sb[1]]],
        [colors[cb[0]], colors[cb[1]]],
        ib,
        qb,
    );
    (a, b)
}

/// The mirrored instance: slots (and with them the mention order) swapped,
/// the queried object unchanged. Used by the relabeling-symmetry check.
pub fn mirror_instance(inst: &ShapesInstance, cfg: &TaskConfig) -> ShapesInstance {
    let pool = inst.scene.pool();
    let vocab = Vocabulary::standard();
    let item_of = |k: usize| -> usize {
        let tok = inst.item_token(k);
        (0..N_ITEMS)
            .find(|&i| vocab.item_token(pool, i) == tok)
            .expect("item token maps back to an index")
    };
    let shapes = [inst.scene.objects[1].shape, inst.scene.objects[0].shape];
    let colors = [inst.scene.objects[1].color, inst.scene.objects[0].color];
    let items = [item_of(1), item_of(0)];
    assemble(
        inst.seed,
        pool,
        cfg,
        shapes,
        colors,
        items,
        1 - inst.queried_k,
    )
}
