//! The production forward and frozen-context paths against the independent
//! per-position f64 reference in `shapelab_core::oracles`.

use std::sync::Arc;

use shapelab_core::intervene::{cache_context, remap_positions, splice, swap_mapping, SpliceRequest};
use shapelab_core::model::{
    bind_params, embed_prompt, extract_cache, forward, freeze_context, frozen_query, full_forward,
    AttnMask, ModelConfig, ModelParams,
};
use shapelab_core::oracles::NaiveModel;
use shapelab_core::rng::Pcg32;
use shapelab_core::shapes::generate::{factorizability_pair, make_instance};
use shapelab_core::shapes::{Pool, Role, TaskConfig};
use shapelab_core::tensor::{Graph, Tensor};

fn small() -> (ModelConfig, ModelParams, TaskConfig) {
    let cfg = ModelConfig::tiny(2, 32, 2);
    let params = ModelParams::init(&cfg, 21);
    (cfg, params, TaskConfig::default())
}

fn graph_embeddings(
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &shapelab_core::shapes::ShapesInstance,
) -> Vec<Vec<f64>> {
    let mut g = Graph::inference();
    let pv = bind_params(&mut g, params);
    let emb = embed_prompt(&mut g, &pv, cfg, inst).unwrap();
    let d = cfg.width;
    g.value(emb)
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// The production batched forward must match the per-position reference.
#[test]
fn batched_forward_matches_naive_reference() {
    let (cfg, params, task) = small();
    for seed in 0..3 {
        let inst = make_instance(seed, Pool::Eval, &task);
        let (g, _, out) = full_forward(&params, &cfg, &inst, false).unwrap();
        let got = g.value(out.logits).data().to_vec();

        let naive = NaiveModel::new(&params, &cfg);
        let emb = graph_embeddings(&params, &cfg, &inst);
        let positions: Vec<i64> = (0..inst.tokens.len() as i64).collect();
        let want = naive.forward(&emb, &positions, &|i, j| j <= i, None);

        let v = cfg.vocab_size;
        for (i, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                let gval = got[i * v + c];
                assert!(
                    (gval as f64 - w).abs() < 1e-4,
                    "seed {seed} pos {i} vocab {c}: {gval} vs {w}"
                );
            }
        }
    }
}

/// Frozen-context answers must equal a brute-force run that overwrites the
/// context rows of every layer input with the (edited) cache.
#[test]
fn frozen_path_matches_overwrite_oracle() {
    let (cfg, params, task) = small();
    let (a, b) = factorizability_pair(11, &task);
    let ca = cache_context(&params, &cfg, &a).unwrap();
    let cb = cache_context(&params, &cfg, &b).unwrap();

    // Exercise the oracle on an unmodified, a spliced, and a remapped cache.
    let spliced = splice(&ca, &cb, &SpliceRequest::new(Role::Object, 0)).unwrap();
    let remapped = {
        let mapping = swap_mapping(&ca, Role::Item).unwrap();
        remap_positions(&ca, &mapping).unwrap()
    };

    let naive = NaiveModel::new(&params, &cfg);
    for (tag, cache) in [("plain", &ca), ("spliced", &spliced), ("remapped", &remapped)] {
        let question = a.question_tokens();
        let frozen = freeze_context(&params, &cfg, cache).unwrap();
        let got = frozen_query(&params, &cfg, &frozen, question).unwrap();
        let want = naive.overwrite_query(cache, question);
        for (c, (&g, &w)) in got.iter().zip(want.iter()).enumerate() {
            assert!((g as f64 - w).abs() < 1e-4, "{tag} vocab {c}: {g} vs {w}");
        }
    }
}

/// With all rotary phases forced to zero, permuting the context tokens and
/// compensating the attention mask changes nothing: position enters only
/// through RoPE.
#[test]
fn no_position_leak_under_permutation() {
    let (cfg, params, _) = small();
    let p = 12usize;
    let d = cfg.width;
    let mut rng = Pcg32::new(5, 0);
    let emb_data: Vec<f32> = (0..p * d).map(|_| rng.gauss() * 0.5).collect();
    let zeros = vec![0i64; p];

    // Baseline: causal mask.
    let mut g = Graph::inference();
    let pv = bind_params(&mut g, &params);
    let emb = g.constant(Tensor::from_vec(vec![p, d], emb_data.clone()).unwrap());
    let out = forward(&mut g, &pv, &cfg, emb, &zeros, &AttnMask::Causal).unwrap();
    let base = g.value(out.logits).data().to_vec();

    // Permuted tokens with the permuted mask.
    let mut perm: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    let mut emb_perm = vec![0.0f32; p * d];
    for (new, &old) in perm.iter().enumerate() {
        emb_perm[new * d..(new + 1) * d].copy_from_slice(&emb_data[old * d..(old + 1) * d]);
    }
    let mut mask = vec![f32::NEG_INFINITY; p * p];
    for i in 0..p {
        for j in 0..p {
            if perm[j] <= perm[i] {
                mask[i * p + j] = 0.0;
            }
        }
    }
    let mut g2 = Graph::inference();
    let pv2 = bind_params(&mut g2, &params);
    let emb2 = g2.constant(Tensor::from_vec(vec![p, d], emb_perm).unwrap());
    let mask2 = AttnMask::Additive(Arc::new(Tensor::from_vec(vec![p, p], mask).unwrap()));
    let out2 = forward(&mut g2, &pv2, &cfg, emb2, &zeros, &mask2).unwrap();
    let permuted = g2.value(out2.logits).data().to_vec();

    let v = cfg.vocab_size;
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..v {
            let a = base[old * v + c];
            let b = permuted[new * v + c];
            assert!((a - b).abs() < 1e-4, "pos {old}->{new} vocab {c}: {a} vs {b}");
        }
    }
}

/// Adding a constant to every position index leaves all logits unchanged:
/// rotary attention only sees relative offsets.
#[test]
fn uniform_position_shift_leaves_logits_unchanged() {
    let (cfg, params, task) = small();
    let inst = make_instance(3, Pool::Eval, &task);
    let run = |shift: i64| -> Vec<f32> {
        let mut g = Graph::inference();
        let pv = bind_params(&mut g, &params);
        let emb = embed_prompt(&mut g, &pv, &cfg, &inst).unwrap();
        let positions: Vec<i64> = (0..inst.tokens.len() as i64).map(|p| p + shift).collect();
        let out = forward(&mut g, &pv, &cfg, emb, &positions, &AttnMask::Causal).unwrap();
        g.value(out.logits).data().to_vec()
    };
    let base = run(0);
    for shift in [1, 17, 300, 1000] {
        let shifted = run(shift);
        for (i, (&a, &b)) in base.iter().zip(&shifted).enumerate() {
            assert!((a - b).abs() < 1e-4, "shift {shift} elem {i}: {a} vs {b}");
        }
    }
}

/// Every (layer, position) visited in the forward pass has a cache entry.
#[test]
fn cache_is_complete_and_finite() {
    let (cfg, params, task) = small();
    let inst = make_instance(8, Pool::Eval, &task);
    let (g, _, out) = full_forward(&params, &cfg, &inst, false).unwrap();
    let positions: Vec<i64> = (0..inst.tokens.len() as i64).collect();
    let cache = extract_cache(&g, &out, &cfg, &positions, None);
    assert_eq!(cache.len, inst.tokens.len());
    assert_eq!(
        cache.resid_raw().len(),
        (cfg.n_layers + 1) * cache.len * cfg.width
    );
    assert!(cache.is_finite());
}
