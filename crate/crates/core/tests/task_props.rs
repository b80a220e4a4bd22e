//! Property tests over generated instances: span disjointness and bounds,
//! fixed object positions, and pool separation.

use proptest::prelude::*;
use shapelab_core::shapes::{generate, Pool, Role, TaskConfig};

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Spans are pairwise disjoint and inside the context for every seed,
    /// pool and crop setting.
    #[test]
    fn spans_are_disjoint_and_in_bounds(
        seed in 0u64..1_000_000,
        estimation in proptest::bool::ANY,
        multi_crop in proptest::bool::ANY,
    ) {
        let pool = if estimation { Pool::Estimation } else { Pool::Eval };
        let cfg = TaskConfig { multi_crop };
        let inst = generate::make_instance(seed, pool, &cfg);
        let spans = inst.spans.all_spans();
        for (role, k, tokens) in &spans {
            prop_assert!(!tokens.is_empty(), "{role:?}/{k} empty");
            for &t in tokens {
                prop_assert!(t < inst.spans.context_len, "{role:?}/{k} out of context");
            }
        }
        for i in 0..spans.len() {
            for j in i + 1..spans.len() {
                for t in &spans[i].2 {
                    prop_assert!(
                        !spans[j].2.contains(t),
                        "{:?}/{} overlaps {:?}/{}",
                        spans[i].0, spans[i].1, spans[j].0, spans[j].1
                    );
                }
            }
        }
    }

    /// Object patch blocks depend only on the slot, never on the content.
    #[test]
    fn object_blocks_are_constant_across_instances(
        seed_a in 0u64..1_000_000,
        seed_b in 0u64..1_000_000,
        multi_crop in proptest::bool::ANY,
    ) {
        let cfg = TaskConfig { multi_crop };
        let a = generate::make_instance(seed_a, Pool::Eval, &cfg);
        let b = generate::make_instance(seed_b, Pool::Eval, &cfg);
        for k in 0..2 {
            prop_assert_eq!(a.spans.object_tokens(k), b.spans.object_tokens(k));
        }
    }

    /// Estimation instances never share a shape, color or item token with
    /// evaluation instances.
    #[test]
    fn pools_never_share_content_tokens(
        seed_a in 0u64..1_000_000,
        seed_b in 0u64..1_000_000,
    ) {
        let cfg = TaskConfig::default();
        let ev = generate::make_instance(seed_a, Pool::Eval, &cfg);
        let es = generate::make_instance(seed_b, Pool::Estimation, &cfg);
        let content = |inst: &shapelab_core::shapes::ShapesInstance| {
            let mut toks = vec![
                inst.tokens[inst.spans.color[0][0]],
                inst.tokens[inst.spans.color[1][0]],
                inst.item_token(0),
                inst.item_token(1),
            ];
            // The queried shape word from the question.
            toks.push(inst.question_tokens()[3]);
            toks
        };
        for t in content(&ev) {
            prop_assert!(!content(&es).contains(&t));
        }
    }

    /// Padded role spans stay inside the context and never touch another
    /// role's span at any legal padding.
    #[test]
    fn padded_spans_respect_other_spans(
        seed in 0u64..1_000_000,
        multi_crop in proptest::bool::ANY,
        padding in 0usize..4,
    ) {
        let cfg = TaskConfig { multi_crop };
        let inst = generate::make_instance(seed, Pool::Eval, &cfg);
        for k in 0..2 {
            let obj = inst.spans.role_tokens_padded(Role::Object, k, padding).unwrap();
            for other_k in 0..2 {
                for role in [Role::Color, Role::Item] {
                    let span = inst.spans.role_tokens_padded(role, other_k, 0).unwrap();
                    for t in &span {
                        prop_assert!(!obj.contains(t));
                    }
                }
            }
        }
    }
}
