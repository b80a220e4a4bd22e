//! Acceptance suite: one test per committed criterion, each printing a
//! pass/fail line (run with `--nocapture` to see them live).
//!
//! Criteria 1-6 are machinery invariants checked on randomly initialized
//! parameters. Criteria 7-11 exercise the scientific pattern on a model
//! trained once here and shared across tests; training takes minutes on a
//! laptop-class CPU.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use shapelab::parallel::{default_threads, try_par_map, tune_allocator, ThreadedRunner};
use shapelab::runner;
use shapelab_core::experiment::{
    delta_split_half, middle_layers, thresholds, FactorizabilityOptions, MeanInterventionOptions,
    PositionOptions,
};
use shapelab_core::intervene::{
    apply_mean_intervention, cache_context, estimate_deltas, remap_positions, splice,
    swap_mapping, SignScheme, SpliceRequest,
};
use shapelab_core::model::{
    bind_params, embed_prompt, forward, forward_with_frozen_context, full_forward, AttnMask,
    ModelConfig, ModelParams,
};
use shapelab_core::oracles::{fd_agrees, op_gradcheck_registry, NaiveModel, FD_STEP};
use shapelab_core::rng::Pcg32;
use shapelab_core::shapes::generate::{factorizability_pair, make_instance, DeltaMatch};
use shapelab_core::shapes::{Pool, Role, TaskConfig};
use shapelab_core::tensor::{kernels, Graph};
use shapelab_core::train::{self, BatchRunner, TrainConfig, TrainError};

/// Training recipe for the shared checkpoint. The default learning rate of
/// 3e-4 stalls on the unigram plateau at this scale; 1e-3 clears it well
/// inside the wall-clock budget.
const TRAIN_LR: f32 = 1e-3;
const TRAIN_STEP_BUDGET: usize = 2500;
const TRAIN_SEED: u64 = 0;

fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("[{status}] {criterion}: {detail}");
    assert!(passed, "{criterion}: {detail}");
}

fn random_model() -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 12345);
    (cfg, params)
}

struct Trained {
    cfg: ModelConfig,
    params: ModelParams,
    minutes: f64,
    steps: usize,
    final_acc: f32,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        tune_allocator();
        let tc = TrainConfig {
            steps: TRAIN_STEP_BUDGET,
            lr: TRAIN_LR,
            seed: TRAIN_SEED,
            ..TrainConfig::default()
        };
        let cfg = ModelConfig::default();
        let runner_impl = ThreadedRunner::new(default_threads());
        let started = Instant::now();
        let mut progress = |row: &shapelab_core::train::MetricsRow| {
            println!(
                "  [train] step {:>5} loss {:.4} acc {:.4} ({:.0}s)",
                row.step,
                row.loss,
                row.accuracy,
                started.elapsed().as_secs_f64()
            );
        };
        let outcome = match train::train(&tc, &cfg, &runner_impl, Some(&mut progress)) {
            Ok(o) => o,
            Err(TrainError::TargetNotReached { outcome, best, .. }) => {
                println!("  [train] budget exhausted, best accuracy {best}");
                *outcome
            }
            Err(e) => panic!("training failed: {e}"),
        };
        let minutes = started.elapsed().as_secs_f64() / 60.0;
        let final_acc = outcome.metrics.last().map(|m| m.accuracy).unwrap_or(0.0);
        println!(
            "  [train] finished after {} steps in {minutes:.1} min (acc {final_acc:.4})",
            outcome.steps_run
        );
        Trained {
            cfg,
            params: outcome.params,
            minutes,
            steps: outcome.steps_run,
            final_acc,
        }
    })
}

// ---------------------------------------------------------------------------
// Machinery criteria (model-independent)
// ---------------------------------------------------------------------------

/// Criterion 1: identity splices are bitwise no-ops for all roles and
/// paddings, in under a minute.
#[test]
fn criterion_1_identity_splice_noop() {
    tune_allocator();
    let started = Instant::now();
    let (cfg, params) = random_model();
    for multi_crop in [false, true] {
        let task = TaskConfig { multi_crop };
        let inst = make_instance(1, Pool::Eval, &task);
        let cache = cache_context(&params, &cfg, &inst).unwrap();
        let baseline =
            forward_with_frozen_context(&params, &cfg, &cache, inst.question_tokens()).unwrap();
        for role in [Role::Object, Role::Color, Role::Item] {
            let paddings: &[usize] = if role == Role::Object { &[0, 1, 2, 3] } else { &[0] };
            for &padding in paddings {
                for k in 0..2 {
                    let req = SpliceRequest::new(role, k).with_padding(padding);
                    let spliced = splice(&cache, &cache, &req).unwrap();
                    let logits = forward_with_frozen_context(
                        &params,
                        &cfg,
                        &spliced,
                        inst.question_tokens(),
                    )
                    .unwrap();
                    assert_eq!(
                        logits, baseline,
                        "role {role:?} k {k} padding {padding} multi_crop {multi_crop}"
                    );
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        "criterion 1 (identity splice no-op)",
        secs < 60.0,
        &format!("bit-identical logits for all roles/paddings in {secs:.1}s (< 60s)"),
    );
}

/// Criterion 2: frozen-context self-consistency within 1e-4 over 100
/// instances.
#[test]
fn criterion_2_frozen_self_consistency() {
    tune_allocator();
    let (cfg, params) = random_model();
    let worst = try_par_map::<_, shapelab_core::model::ModelError, _>(
        100,
        default_threads(),
        |i| {
            let inst = make_instance(2000 + i as u64, Pool::Eval, &TaskConfig::default());
            let (g, _, out) = full_forward(&params, &cfg, &inst, false)?;
            let p = inst.tokens.len();
            let v = cfg.vocab_size;
            let full = g.value(out.logits).data()[(p - 1) * v..p * v].to_vec();
            let cache = cache_context(&params, &cfg, &inst).map_err(|e| match e {
                shapelab_core::intervene::InterveneError::Model(m) => m,
                other => panic!("{other}"),
            })?;
            let frozen =
                forward_with_frozen_context(&params, &cfg, &cache, inst.question_tokens())?;
            let mut worst = 0.0f32;
            for (a, b) in full.iter().zip(&frozen) {
                worst = worst.max((a - b).abs());
            }
            Ok(worst)
        },
    )
    .unwrap()
    .into_iter()
    .fold(0.0f32, f32::max);
    report(
        "criterion 2 (frozen-context self-consistency)",
        worst < 1e-4,
        &format!("max |frozen - full| = {worst:.2e} over 100 instances (< 1e-4)"),
    );
}

/// Criterion 3: rotary properties — uniform shift invariance (1e-4), norm
/// preservation (1e-6), relative-dot identity (1e-5).
#[test]
fn criterion_3_rope_relative_property() {
    tune_allocator();
    let (cfg, params) = random_model();
    let inst = make_instance(3, Pool::Eval, &TaskConfig::default());
    let run = |shift: i64| -> Vec<f32> {
        let mut g = Graph::inference();
        let pv = bind_params(&mut g, &params);
        let emb = embed_prompt(&mut g, &pv, &cfg, &inst).unwrap();
        let positions: Vec<i64> = (0..inst.tokens.len() as i64).map(|p| p + shift).collect();
        let out = forward(&mut g, &pv, &cfg, emb, &positions, &AttnMask::Causal).unwrap();
        g.value(out.logits).data().to_vec()
    };
    let base = run(0);
    let mut worst_shift = 0.0f32;
    for shift in [1, 64, 911] {
        for (a, b) in base.iter().zip(run(shift).iter()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }

    let mut rng = Pcg32::new(77, 0);
    let mut worst_norm = 0.0f32;
    let mut worst_dot = 0.0f32;
    for trial in 0..200 {
        let v: Vec<f32> = (0..32).map(|_| rng.gauss()).collect();
        let pos = (trial * 13 % 2048) as i64;
        let r = kernels::rope_rotate(&v, pos, cfg.rope_base);
        let n0: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let n1: f32 = r.iter().map(|x| x * x).sum::<f32>().sqrt();
        worst_norm = worst_norm.max((n0 - n1).abs() / n0.max(1.0));

        let q: Vec<f32> = (0..32).map(|_| rng.gauss()).collect();
        let (m, n, s) = (pos, (trial * 7 % 300) as i64, (trial * 31 % 1500) as i64);
        let d0 = kernels::dot(
            &kernels::rope_rotate(&q, m, cfg.rope_base),
            &kernels::rope_rotate(&v, n, cfg.rope_base),
        );
        let d1 = kernels::dot(
            &kernels::rope_rotate(&q, m + s, cfg.rope_base),
            &kernels::rope_rotate(&v, n + s, cfg.rope_base),
        );
        worst_dot = worst_dot.max((d0 - d1).abs());
    }
    report(
        "criterion 3 (RoPE relative property)",
        worst_shift < 1e-4 && worst_norm < 1e-6 && worst_dot < 1e-5,
        &format!(
            "shift {worst_shift:.2e} (<1e-4), norm {worst_norm:.2e} (<1e-6), dot {worst_dot:.2e} (<1e-5)"
        ),
    );
}

/// Criterion 4: every registered op and the full loss pass central
/// finite-difference checks.
#[test]
fn criterion_4_gradient_checks() {
    tune_allocator();
    for (name, check) in op_gradcheck_registry() {
        check(0xACCE ^ name.len() as u64);
    }

    let cfg = ModelConfig::tiny(1, 8, 2);
    let params = ModelParams::init(&cfg, 3);
    let inst = make_instance(5, Pool::Eval, &TaskConfig::default());
    let (_, grads) = train::instance_loss_grads(&params, &cfg, &inst).unwrap();
    let mut rng = Pcg32::new(17, 0);
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let numel = params.named()[ti].1.numel();
        for _ in 0..numel.min(4) {
            let e = rng.below(numel);
            let mut perturbed = params.clone();
            {
                let mut named = perturbed.named_mut();
                Arc::make_mut(named[ti].1).data_mut()[e] += FD_STEP;
            }
            let up = train::instance_loss(&perturbed, &cfg, &inst).unwrap();
            {
                let mut named = perturbed.named_mut();
                Arc::make_mut(named[ti].1).data_mut()[e] -= 2.0 * FD_STEP;
            }
            let down = train::instance_loss(&perturbed, &cfg, &inst).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            assert!(
                fd_agrees(grads[ti][e], numeric),
                "{name}[{e}]: {} vs {numeric}",
                grads[ti][e]
            );
        }
    }
    report(
        "criterion 4 (gradient checks)",
        true,
        "every registered op and the full loss match central differences",
    );
}

/// Criterion 5: production forward matches the naive per-position
/// reference; the frozen path matches the mid-forward overwrite oracle.
#[test]
fn criterion_5_oracle_equivalence() {
    tune_allocator();
    let (cfg, params) = random_model();
    let task = TaskConfig::default();
    let naive = NaiveModel::new(&params, &cfg);

    // Batched forward vs per-position reference.
    let inst = make_instance(11, Pool::Eval, &task);
    let (g, pv, out) = full_forward(&params, &cfg, &inst, false).unwrap();
    let got = g.value(out.logits).data().to_vec();
    let emb: Vec<Vec<f64>> = {
        let mut g2 = Graph::inference();
        let pv2 = bind_params(&mut g2, &params);
        let e = embed_prompt(&mut g2, &pv2, &cfg, &inst).unwrap();
        g2.value(e)
            .data()
            .chunks(cfg.width)
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect()
    };
    drop(pv);
    let positions: Vec<i64> = (0..inst.tokens.len() as i64).collect();
    let want = naive.forward(&emb, &positions, &|i, j| j <= i, None);
    let mut worst_fwd = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            worst_fwd = worst_fwd.max((got[i * cfg.vocab_size + c] as f64 - w).abs());
        }
    }

    // Frozen path (plain + spliced + remapped) vs the overwrite oracle.
    let (a, b) = factorizability_pair(12, &task);
    let ca = cache_context(&params, &cfg, &a).unwrap();
    let cb = cache_context(&params, &cfg, &b).unwrap();
    let spliced = splice(&ca, &cb, &SpliceRequest::new(Role::Object, 0)).unwrap();
    let remapped = remap_positions(&ca, &swap_mapping(&ca, Role::Item).unwrap()).unwrap();
    let mut worst_frozen = 0.0f64;
    for cache in [&ca, &spliced, &remapped] {
        let got =
            forward_with_frozen_context(&params, &cfg, cache, a.question_tokens()).unwrap();
        let want = naive.overwrite_query(cache, a.question_tokens());
        for (x, w) in got.iter().zip(&want) {
            worst_frozen = worst_frozen.max((*x as f64 - w).abs());
        }
    }
    report(
        "criterion 5 (oracle equivalence)",
        worst_fwd < 1e-4 && worst_frozen < 1e-4,
        &format!("forward {worst_fwd:.2e}, frozen-vs-overwrite {worst_frozen:.2e} (< 1e-4)"),
    );
}

/// Criterion 6: intervention algebra — +delta then -delta restores bits,
/// role applications commute on disjoint spans, remaps touch metadata only.
#[test]
fn criterion_6_intervention_algebra() {
    tune_allocator();
    let (cfg, params) = random_model();
    let task = TaskConfig::default();
    let inst = make_instance(21, Pool::Eval, &task);
    let cache = cache_context(&params, &cfg, &inst).unwrap();

    let seeds: Vec<u64> = (0..4).collect();
    let d_o =
        estimate_deltas(&params, &cfg, &task, &seeds, Role::Object, DeltaMatch::Full, 1, 4)
            .unwrap();
    let d_i = estimate_deltas(&params, &cfg, &task, &seeds, Role::Item, DeltaMatch::Full, 0, 4)
        .unwrap();

    let applied = apply_mean_intervention(&cache, &[&d_o], SignScheme::Forward).unwrap();
    let restored = apply_mean_intervention(&applied, &[&d_o], SignScheme::Negated).unwrap();
    let restore_ok = restored.resid_raw() == cache.resid_raw();

    let oi = apply_mean_intervention(
        &apply_mean_intervention(&cache, &[&d_o], SignScheme::Forward).unwrap(),
        &[&d_i],
        SignScheme::Forward,
    )
    .unwrap();
    let io = apply_mean_intervention(
        &apply_mean_intervention(&cache, &[&d_i], SignScheme::Forward).unwrap(),
        &[&d_o],
        SignScheme::Forward,
    )
    .unwrap();
    let commute_ok = oi.resid_raw() == io.resid_raw();

    let remapped = remap_positions(&cache, &swap_mapping(&cache, Role::Object).unwrap()).unwrap();
    let remap_ok = cache.shares_resid_with(&remapped) && remapped.positions != cache.positions;

    report(
        "criterion 6 (intervention algebra)",
        restore_ok && commute_ok && remap_ok,
        &format!("restore {restore_ok}, commute {commute_ok}, remap metadata-only {remap_ok}"),
    );
}

// ---------------------------------------------------------------------------
// Scientific-pattern criteria (trained model)
// ---------------------------------------------------------------------------

/// An untrained model sits at the two-way chance level.
#[test]
fn untrained_accuracy_is_chance_level() {
    tune_allocator();
    let (cfg, params) = random_model();
    let runner_impl = ThreadedRunner::new(default_threads());
    let acc = train::evaluate(&params, &cfg, &runner_impl, 1000, 42_000).unwrap();
    report(
        "untrained chance level",
        (acc - 0.5).abs() <= 0.1,
        &format!("random-init accuracy {acc:.3} within 0.5 +/- 0.1 at n=1000"),
    );
}

/// Criterion 7: the trained checkpoint reaches the base-task accuracy gate
/// within the wall-clock budget; accuracy is symmetric under relabeling
/// (mirroring which object is listed first).
#[test]
fn criterion_7_base_task_accuracy() {
    let t = trained();
    let runner_impl = ThreadedRunner::new(default_threads());
    let acc = train::evaluate(&t.params, &t.cfg, &runner_impl, 500, 7_000_000).unwrap();
    report(
        "criterion 7 (base task)",
        acc >= thresholds::EVAL_ACCURACY_MIN && t.minutes <= 30.0,
        &format!(
            "held-out accuracy {acc:.4} (>= {}), trained {} steps in {:.1} min (<= 30)",
            thresholds::EVAL_ACCURACY_MIN,
            t.steps,
            t.minutes
        ),
    );

    // Paired evaluation on mirrored scenes.
    let task = TaskConfig::default();
    let originals = train::eval_instances(150, 9_000_000);
    let mirrored: Vec<_> = originals
        .iter()
        .map(|i| shapelab_core::shapes::generate::mirror_instance(i, &task))
        .collect();
    let acc_of = |set: &[shapelab_core::shapes::ShapesInstance]| -> f32 {
        let evals = runner_impl.evaluate(&t.params, &t.cfg, set).unwrap();
        evals.iter().filter(|e| e.correct).count() as f32 / evals.len() as f32
    };
    let (a0, a1) = (acc_of(&originals), acc_of(&mirrored));
    report(
        "criterion 7 (relabeling symmetry)",
        (a0 - a1).abs() <= 0.05,
        &format!("accuracy {a0:.3} vs mirrored {a1:.3} (|diff| <= 0.05)"),
    );
}

/// Criterion 8: factorizability — object and item splices transfer
/// bindings on >= 80% of pairs; color splices preserve the argmax pattern
/// on >= 95%.
#[test]
fn criterion_8_factorizability() {
    let t = trained();
    let task = TaskConfig::default();
    for role in [Role::Object, Role::Item, Role::Color] {
        let opts = FactorizabilityOptions::new(role);
        let rep = runner::run_factorizability(&t.params, &t.cfg, &task, &opts, default_threads())
            .unwrap();
        for c in &rep.checks {
            report(
                &format!("criterion 8 (factorizability {})", c.id),
                c.passed,
                &format!("{} = {:.3} vs {:.2}", c.description, c.value, c.threshold),
            );
        }
    }
}

/// Criterion 9: position independence — bound beats unbound at every
/// schedule offset (including the full swap) on >= 90% of instances, and
/// swap accuracy stays within 0.05 of baseline.
#[test]
fn criterion_9_position_independence() {
    let t = trained();
    let task = TaskConfig::default();
    for role in [Role::Object, Role::Item, Role::Color] {
        let opts = PositionOptions::new(role);
        let rep = runner::run_position(&t.params, &t.cfg, &task, &opts, default_threads()).unwrap();
        for c in &rep.checks {
            report(
                &format!(
                    "criterion 9 (position {} {})",
                    shapelab_core::experiment::role_tag(role),
                    c.id
                ),
                c.passed,
                &format!("{} = {:.3} vs {:.2}", c.description, c.value, c.threshold),
            );
        }
    }
}

/// Criterion 10: mean interventions reproduce the paper's table pattern,
/// random controls stay at baseline, and the run finishes inside 10
/// minutes.
#[test]
fn criterion_10_mean_interventions() {
    let t = trained();
    let task = TaskConfig::default();
    let started = Instant::now();
    let deltas = runner::estimate_delta_set_threaded(
        &t.params,
        &t.cfg,
        &task,
        shapelab_core::experiment::DEFAULT_N_DELTA_PAIRS,
        0,
        1,
        default_threads(),
    )
    .unwrap();
    let opts = MeanInterventionOptions::default();
    let rep =
        runner::run_mean_interventions(&t.params, &t.cfg, &task, &deltas, &opts, default_threads())
            .unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    for c in &rep.checks {
        report(
            &format!("criterion 10 (mean {})", c.id),
            c.passed,
            &format!("{} = {:.3} vs {:.2}", c.description, c.value, c.threshold),
        );
    }
    report(
        "criterion 10 (runtime)",
        minutes < 10.0,
        &format!("estimation plus 200 instances in {minutes:.1} min (< 10)"),
    );

    // Companion check: object deltas estimated from pairs matched on color
    // only (shapes differ) still flip the bindings — content cancels in
    // the mean.
    let seeds: Vec<u64> = (0..50).map(|i| 0xC01u64 ^ (i << 16) ^ i).collect();
    let color_matched = estimate_deltas(
        &t.params,
        &t.cfg,
        &task,
        &seeds,
        Role::Object,
        DeltaMatch::ColorOnly,
        1,
        50,
    )
    .unwrap();
    let flips = try_par_map::<_, shapelab_core::intervene::InterveneError, _>(
        60,
        default_threads(),
        |i| {
            let inst = make_instance(11_000_000 + i as u64, Pool::Eval, &task);
            let cache = cache_context(&t.params, &t.cfg, &inst)?;
            let edited =
                apply_mean_intervention(&cache, &[&color_matched], SignScheme::Forward)?;
            let frozen =
                shapelab_core::model::freeze_context(&t.params, &t.cfg, &edited).unwrap();
            let mut wrong = 0usize;
            for k in 0..2 {
                let q = {
                    let vocab = shapelab_core::shapes::Vocabulary::standard();
                    let mut toks = vocab
                        .tokenize(&shapelab_core::shapes::vocab::question_sentence(
                            inst.scene.objects[k].shape,
                        ))
                        .unwrap();
                    toks.push(vocab.ans());
                    toks
                };
                let logits =
                    shapelab_core::model::frozen_query(&t.params, &t.cfg, &frozen, &q).unwrap();
                let (l0, l1) = shapelab_core::model::two_way_logprobs(
                    &logits,
                    inst.item_token(0),
                    inst.item_token(1),
                );
                let correct = if k == 0 { l0 > l1 } else { l1 > l0 };
                if !correct {
                    wrong += 1;
                }
            }
            Ok(wrong)
        },
    )
    .unwrap()
    .into_iter()
    .sum::<usize>();
    let flip_rate = flips as f32 / 120.0;
    report(
        "criterion 10 (color-matched object deltas still flip)",
        flip_rate >= 0.65,
        &format!("flip rate {flip_rate:.3} (>= 0.65) from color-only matched pairs"),
    );
}

/// Criterion 11: split-half stability of the estimated object and item
/// deltas at middle layers.
#[test]
fn criterion_11_delta_stability() {
    let t = trained();
    let task = TaskConfig::default();
    let mids = middle_layers(t.cfg.n_layers);
    for role in [Role::Object, Role::Item] {
        let rep = delta_split_half(&t.params, &t.cfg, &task, role, 50, 3).unwrap();
        let cosines = &rep.curves[0].series[0].values;
        for &l in &mids {
            report(
                &format!(
                    "criterion 11 (delta {} layer {l})",
                    shapelab_core::experiment::role_tag(role)
                ),
                cosines[l] >= thresholds::DELTA_SPLIT_COS_MIN,
                &format!(
                    "split-half cosine {:.3} (>= {})",
                    cosines[l],
                    thresholds::DELTA_SPLIT_COS_MIN
                ),
            );
        }
    }
}
