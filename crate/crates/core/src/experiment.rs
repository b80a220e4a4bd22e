//! The three experiment families — factorizability splices, position
//! independence sweeps, and mean interventions — plus machine-readable
//! reports and the committed pass/fail thresholds.
//!
//! Each family exposes a per-instance function (pure in its seed) and an
//! aggregator; the serial runners here just map and aggregate. Reports are
//! identical across runs and worker counts because the per-instance results
//! are reduced in seed order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::intervene::{
    apply_mean_intervention, cache_context, estimate_deltas, layer_cosine, offset_mapping,
    random_control_vectors, remap_positions, splice, swap_mapping, swap_offset, DeltaVectors,
    InterveneError, LayerSet, SignScheme, SpliceRequest,
};
use crate::model::{
    freeze_context, frozen_query, two_way_logprobs, ModelConfig, ModelError, ModelParams,
};
use crate::shapes::generate::{factorizability_pair, make_instance, DeltaMatch};
use crate::shapes::vocab::Vocabulary;
use crate::shapes::{Pool, Role, Shape, TaskConfig};

/// Committed acceptance thresholds. `--check` runs and the acceptance test
/// suite read exactly these values.
pub mod thresholds {
    /// Trained checkpoint held-out accuracy gate.
    pub const EVAL_ACCURACY_MIN: f32 = 0.95;
    /// Fraction of spliced entities preferring the original tuple's item.
    pub const FACT_TRANSFER_MIN: f32 = 0.80;
    /// Fraction of color-splice conditions preserving the argmax pattern.
    pub const FACT_COLOR_PRESERVE_MIN: f32 = 0.95;
    /// Fraction of instances with bound > unbound at every offset.
    pub const POS_BOUND_MIN: f32 = 0.90;
    /// Allowed accuracy drift between the no-shift and full-swap endpoints.
    pub const POS_SWAP_ACC_TOL: f32 = 0.05;
    /// Mean-vector condition gates (accuracy on original bindings).
    pub const MEAN_NONE_MIN: f32 = 0.95;
    pub const MEAN_O_MAX: f32 = 0.20;
    pub const MEAN_I_MAX: f32 = 0.20;
    pub const MEAN_C_MIN: f32 = 0.90;
    pub const MEAN_OI_MIN: f32 = 0.90;
    pub const MEAN_OIC_MIN: f32 = 0.90;
    /// Random-control drift bound relative to the None condition.
    pub const RANDOM_CONTROL_TOL: f32 = 0.05;
    /// Split-half cosine similarity of estimated deltas at middle layers.
    pub const DELTA_SPLIT_COS_MIN: f32 = 0.80;
}

/// Default desk-scale sample counts.
pub const DEFAULT_N_PAIRS: usize = 200;
pub const DEFAULT_N_INSTANCES: usize = 200;
/// Default estimation pair count per delta role.
pub const DEFAULT_N_DELTA_PAIRS: usize = 100;

/// Seed offset separating experiment instances from the trainer's held-out
/// range (both live in the evaluation pool, disjoint seeds).
pub const EXPERIMENT_SEED_BASE: u64 = (1 << 40) + (1 << 30);

#[derive(Debug)]
pub enum ExperimentError {
    Model(ModelError),
    Intervene(InterveneError),
    EmptySchedule,
    ScheduleCollision { offset: i64 },
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::Intervene(e) => write!(f, "intervention error: {e}"),
            Self::EmptySchedule => write!(f, "position schedule is empty"),
            Self::ScheduleCollision { offset } => {
                write!(f, "offset {offset} makes remapped spans collide")
            }
        }
    }
}

impl core::error::Error for ExperimentError {}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<InterveneError> for ExperimentError {
    fn from(e: InterveneError) -> Self {
        Self::Intervene(e)
    }
}

// ---------------------------------------------------------------------------
// Report structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CheckOp {
    /// Pass when `value >= threshold`.
    AtLeast,
    /// Pass when `value <= threshold`.
    AtMost,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Check {
    pub id: String,
    pub description: String,
    pub value: f32,
    pub threshold: f32,
    pub op: CheckOp,
    pub passed: bool,
}

impl Check {
    pub fn new(id: &str, description: String, value: f32, threshold: f32, op: CheckOp) -> Self {
        let passed = match op {
            CheckOp::AtLeast => value >= threshold,
            CheckOp::AtMost => value <= threshold,
        };
        Self {
            id: id.to_string(),
            description,
            value,
            threshold,
            op,
            passed,
        }
    }
}

/// `[rows x cols]` of mean log probabilities (or accuracies for tables).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    pub id: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major values.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Series {
    pub label: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Curve {
    pub id: String,
    pub x_label: String,
    pub x: Vec<f32>,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentReport {
    pub experiment: String,
    /// Key/value snapshot of the configuration that produced the report.
    pub config: Vec<(String, String)>,
    pub checkpoint_fingerprint: u64,
    pub n_samples: usize,
    pub grids: Vec<Grid>,
    pub curves: Vec<Curve>,
    pub tables: Vec<Grid>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn question_tokens(shape: Shape) -> Vec<u32> {
    let vocab = Vocabulary::standard();
    let mut toks = vocab
        .tokenize(&crate::shapes::vocab::question_sentence(shape))
        .expect("question template in vocab");
    toks.push(vocab.ans());
    toks
}

// ---------------------------------------------------------------------------
// Factorizability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactCondition {
    Unaltered,
    SpliceK0,
    SpliceK1,
    SpliceBoth,
}

pub const FACT_CONDITIONS: [FactCondition; 4] = [
    FactCondition::Unaltered,
    FactCondition::SpliceK0,
    FactCondition::SpliceK1,
    FactCondition::SpliceBoth,
];

impl FactCondition {
    pub fn label(self) -> &'static str {
        match self {
            Self::Unaltered => "unaltered",
            Self::SpliceK0 => "splice_k0",
            Self::SpliceK1 => "splice_k1",
            Self::SpliceBoth => "splice_both",
        }
    }

    fn spliced(self) -> &'static [usize] {
        match self {
            Self::Unaltered => &[],
            Self::SpliceK0 => &[0],
            Self::SpliceK1 => &[1],
            Self::SpliceBoth => &[0, 1],
        }
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FactorizabilityOptions {
    pub role: Role,
    pub n_pairs: usize,
    pub padding: usize,
    pub seed: u64,
    pub layers: LayerSet,
}

impl FactorizabilityOptions {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            n_pairs: DEFAULT_N_PAIRS,
            padding: crate::intervene::default_padding(role),
            seed: 0,
            layers: LayerSet::All,
        }
    }
}

/// One context pair's grids and transfer events.
#[derive(Debug, Clone)]
pub struct FactPairOutcome {
    /// `[condition][queried shape 0..4][item 0..2]` two-way log probs.
    pub grids: [[[f32; 2]; 4]; 4],
    /// Item tokens present in the context per condition.
    pub items: [[u32; 2]; 4],
    /// For OBJECT/ITEM roles: one event per spliced entity per condition.
    pub transfer_events: Vec<bool>,
    /// For COLOR role: one event per spliced condition (argmax pattern kept).
    pub preserve_events: Vec<bool>,
}

/// Run all four conditions of one factorizability pair.
pub fn factorizability_pair_outcome(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &FactorizabilityOptions,
    pair_index: usize,
) -> Result<FactPairOutcome, ExperimentError> {
    let pair_seed = opts.seed ^ (pair_index as u64).wrapping_mul(0x2545F4914F6CDD1D);
    let (a, b) = factorizability_pair(pair_seed, task);
    let ca = cache_context(params, cfg, &a)?;
    let cb = cache_context(params, cfg, &b)?;

    let queried_shapes = [
        a.scene.objects[0].shape,
        a.scene.objects[1].shape,
        b.scene.objects[0].shape,
        b.scene.objects[1].shape,
    ];
    let dst_items = [a.item_token(0), a.item_token(1)];
    let src_items = [b.item_token(0), b.item_token(1)];

    let mut grids = [[[0.0f32; 2]; 4]; 4];
    let mut items = [[0u32; 2]; 4];
    let mut transfer_events = Vec::new();
    let mut preserve_events = Vec::new();
    let mut unaltered_argmax = [0usize; 4];

    for (ci, cond) in FACT_CONDITIONS.iter().enumerate() {
        let mut cache = ca.clone();
        for &k in cond.spliced() {
            let req = SpliceRequest {
                role: opts.role,
                k,
                padding: opts.padding,
                layers: opts.layers.clone(),
            };
            cache = splice(&cache, &cb, &req)?;
        }
        // Items present after the splice (item splices swap the letters in).
        let mut present = dst_items;
        if opts.role == Role::Item {
            for &k in cond.spliced() {
                present[k] = src_items[k];
            }
        }
        items[ci] = present;

        let frozen = freeze_context(params, cfg, &cache)?;
        for (qi, &shape) in queried_shapes.iter().enumerate() {
            let logits = frozen_query(params, cfg, &frozen, &question_tokens(shape))?;
            let (l0, l1) = two_way_logprobs(&logits, present[0], present[1]);
            grids[ci][qi] = [l0, l1];
        }

        let argmax_row =
            |qi: usize| -> usize { (grids[ci][qi][1] > grids[ci][qi][0]) as usize };
        match opts.role {
            Role::Object => {
                // Spliced-in shape O'_k must prefer the original tuple's item.
                for &k in cond.spliced() {
                    transfer_events.push(argmax_row(2 + k) == k);
                }
            }
            Role::Item => {
                // The original object O_k must prefer the spliced-in item.
                for &k in cond.spliced() {
                    transfer_events.push(argmax_row(k) == k);
                }
            }
            Role::Color => {
                if *cond == FactCondition::Unaltered {
                    for qi in 0..4 {
                        unaltered_argmax[qi] = argmax_row(qi);
                    }
                } else {
                    preserve_events
                        .push((0..4).all(|qi| argmax_row(qi) == unaltered_argmax[qi]));
                }
            }
        }
    }

    Ok(FactPairOutcome {
        grids,
        items,
        transfer_events,
        preserve_events,
    })
}

/// Average pair outcomes into the report.
pub fn aggregate_factorizability(
    outcomes: &[FactPairOutcome],
    opts: &FactorizabilityOptions,
    fingerprint: u64,
) -> ExperimentReport {
    let n = outcomes.len();
    let inv = 1.0 / n.max(1) as f32;
    let mut grids = Vec::new();
    for (ci, cond) in FACT_CONDITIONS.iter().enumerate() {
        let mut values = vec![0.0f32; 8];
        for o in outcomes {
            for qi in 0..4 {
                for ii in 0..2 {
                    values[qi * 2 + ii] += o.grids[ci][qi][ii] * inv;
                }
            }
        }
        grids.push(Grid {
            id: format!("{}_{}", role_tag(opts.role), cond.label()),
            row_labels: vec![
                "O0".to_string(),
                "O1".to_string(),
                "O'0".to_string(),
                "O'1".to_string(),
            ],
            col_labels: vec!["item_t0".to_string(), "item_t1".to_string()],
            values,
        });
    }

    let mut checks = Vec::new();
    match opts.role {
        Role::Object | Role::Item => {
            let events: Vec<bool> = outcomes
                .iter()
                .flat_map(|o| o.transfer_events.iter().copied())
                .collect();
            let frac = events.iter().filter(|&&e| e).count() as f32 / events.len().max(1) as f32;
            checks.push(Check::new(
                "fact_transfer",
                format!(
                    "{} splices transfer bindings (spliced-in entity prefers the original tuple's item)",
                    role_tag(opts.role)
                ),
                frac,
                thresholds::FACT_TRANSFER_MIN,
                CheckOp::AtLeast,
            ));
        }
        Role::Color => {
            let events: Vec<bool> = outcomes
                .iter()
                .flat_map(|o| o.preserve_events.iter().copied())
                .collect();
            let frac = events.iter().filter(|&&e| e).count() as f32 / events.len().max(1) as f32;
            checks.push(Check::new(
                "fact_color_preserve",
                "color splices leave every queried object's argmax item unchanged".to_string(),
                frac,
                thresholds::FACT_COLOR_PRESERVE_MIN,
                CheckOp::AtLeast,
            ));
        }
    }

    ExperimentReport {
        experiment: "factorizability".to_string(),
        config: vec![
            ("role".to_string(), role_tag(opts.role).to_string()),
            ("n_pairs".to_string(), format!("{}", opts.n_pairs)),
            ("padding".to_string(), format!("{}", opts.padding)),
            ("seed".to_string(), format!("{}", opts.seed)),
        ],
        checkpoint_fingerprint: fingerprint,
        n_samples: n,
        grids,
        curves: Vec::new(),
        tables: Vec::new(),
        checks,
    }
}

/// Serial end-to-end factorizability run.
pub fn run_factorizability(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &FactorizabilityOptions,
) -> Result<ExperimentReport, ExperimentError> {
    let outcomes: Result<Vec<_>, _> = (0..opts.n_pairs)
        .map(|i| factorizability_pair_outcome(params, cfg, task, opts, i))
        .collect();
    Ok(aggregate_factorizability(
        &outcomes?,
        opts,
        params.fingerprint(cfg),
    ))
}

pub fn role_tag(role: Role) -> &'static str {
    match role {
        Role::Object => "object",
        Role::Color => "color",
        Role::Item => "item",
    }
}

// ---------------------------------------------------------------------------
// Position independence
// ---------------------------------------------------------------------------

/// One step of the position schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScheduleStep {
    /// Tuple 0 positions `+t`, tuple 1 positions `-t`.
    Offset(i64),
    /// Full exchange of the two spans' positions.
    Swap,
}

pub fn default_schedule() -> Vec<ScheduleStep> {
    vec![
        ScheduleStep::Offset(0),
        ScheduleStep::Offset(1),
        ScheduleStep::Offset(2),
        ScheduleStep::Offset(4),
        ScheduleStep::Swap,
    ]
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionOptions {
    pub role: Role,
    pub n_instances: usize,
    pub schedule: Vec<ScheduleStep>,
    pub seed: u64,
}

impl PositionOptions {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            n_instances: DEFAULT_N_INSTANCES,
            schedule: default_schedule(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosInstanceOutcome {
    /// `[step][k][bound, unbound]` log probabilities.
    pub logps: Vec<[[f32; 2]; 2]>,
    /// Bound beats unbound for both tuples at every step.
    pub always_bound: bool,
    /// Two-way correctness per tuple at the first step and at the swap.
    pub baseline_correct: [bool; 2],
    pub swap_correct: Option<[bool; 2]>,
}

/// Sweep one instance through the schedule.
pub fn position_instance_outcome(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &PositionOptions,
    index: usize,
) -> Result<PosInstanceOutcome, ExperimentError> {
    if opts.schedule.is_empty() {
        return Err(ExperimentError::EmptySchedule);
    }
    let seed = EXPERIMENT_SEED_BASE
        + (opts.seed << 24)
        + index as u64;
    let inst = make_instance(seed, Pool::Eval, task);
    let cache = cache_context(params, cfg, &inst)?;

    let mut logps = Vec::with_capacity(opts.schedule.len());
    let mut always_bound = true;
    let mut baseline_correct = [false; 2];
    let mut swap_correct = None;

    for (si, step) in opts.schedule.iter().enumerate() {
        let mapping = match step {
            ScheduleStep::Offset(t) => offset_mapping(&cache, opts.role, *t)?,
            ScheduleStep::Swap => swap_mapping(&cache, opts.role)?,
        };
        let remapped = remap_positions(&cache, &mapping).map_err(|e| match e {
            InterveneError::DuplicateRemapTarget { position } => {
                ExperimentError::ScheduleCollision { offset: position }
            }
            other => ExperimentError::Intervene(other),
        })?;
        let frozen = freeze_context(params, cfg, &remapped)?;
        let mut entry = [[0.0f32; 2]; 2];
        let mut correct = [false; 2];
        for k in 0..2 {
            let shape = inst.scene.objects[k].shape;
            let logits = frozen_query(params, cfg, &frozen, &question_tokens(shape))?;
            let (l0, l1) = two_way_logprobs(&logits, inst.item_token(0), inst.item_token(1));
            let (bound, unbound) = if k == 0 { (l0, l1) } else { (l1, l0) };
            entry[k] = [bound, unbound];
            correct[k] = bound > unbound;
            if bound <= unbound {
                always_bound = false;
            }
        }
        logps.push(entry);
        if si == 0 {
            baseline_correct = correct;
        }
        if matches!(step, ScheduleStep::Swap) {
            swap_correct = Some(correct);
        }
    }

    Ok(PosInstanceOutcome {
        logps,
        always_bound,
        baseline_correct,
        swap_correct,
    })
}

pub fn aggregate_position(
    outcomes: &[PosInstanceOutcome],
    opts: &PositionOptions,
    swap_at: i64,
    fingerprint: u64,
) -> ExperimentReport {
    let n = outcomes.len();
    let inv = 1.0 / n.max(1) as f32;
    let x: Vec<f32> = opts
        .schedule
        .iter()
        .map(|s| match s {
            ScheduleStep::Offset(t) => *t as f32,
            ScheduleStep::Swap => swap_at as f32,
        })
        .collect();
    let mut series = vec![
        Series {
            label: "bound O0<->I0".to_string(),
            values: vec![0.0; x.len()],
        },
        Series {
            label: "bound O1<->I1".to_string(),
            values: vec![0.0; x.len()],
        },
        Series {
            label: "unbound O0<->I1".to_string(),
            values: vec![0.0; x.len()],
        },
        Series {
            label: "unbound O1<->I0".to_string(),
            values: vec![0.0; x.len()],
        },
    ];
    for o in outcomes {
        for (si, entry) in o.logps.iter().enumerate() {
            series[0].values[si] += entry[0][0] * inv;
            series[1].values[si] += entry[1][0] * inv;
            series[2].values[si] += entry[0][1] * inv;
            series[3].values[si] += entry[1][1] * inv;
        }
    }

    let bound_frac =
        outcomes.iter().filter(|o| o.always_bound).count() as f32 / n.max(1) as f32;
    let acc = |f: &dyn Fn(&PosInstanceOutcome) -> Option<[bool; 2]>| -> f32 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for o in outcomes {
            if let Some(c) = f(o) {
                hits += c.iter().filter(|&&b| b).count();
                total += 2;
            }
        }
        hits as f32 / total.max(1) as f32
    };
    let base_acc = acc(&|o| Some(o.baseline_correct));
    let swap_acc = acc(&|o| o.swap_correct);

    let mut checks = vec![Check::new(
        "pos_bound_above_unbound",
        "bound pairing beats unbound at every schedule offset".to_string(),
        bound_frac,
        thresholds::POS_BOUND_MIN,
        CheckOp::AtLeast,
    )];
    if outcomes.iter().any(|o| o.swap_correct.is_some()) {
        checks.push(Check::new(
            "pos_swap_accuracy_drift",
            format!("full-swap accuracy ({swap_acc:.3}) within tolerance of baseline ({base_acc:.3})"),
            (swap_acc - base_acc).abs(),
            thresholds::POS_SWAP_ACC_TOL,
            CheckOp::AtMost,
        ));
    }

    ExperimentReport {
        experiment: "position_independence".to_string(),
        config: vec![
            ("role".to_string(), role_tag(opts.role).to_string()),
            ("n_instances".to_string(), format!("{}", opts.n_instances)),
            ("seed".to_string(), format!("{}", opts.seed)),
            ("swap_offset".to_string(), format!("{swap_at}")),
        ],
        checkpoint_fingerprint: fingerprint,
        n_samples: n,
        grids: Vec::new(),
        curves: vec![Curve {
            id: format!("position_{}", role_tag(opts.role)),
            x_label: "position increment".to_string(),
            x,
            series,
        }],
        tables: Vec::new(),
        checks,
    }
}

/// Resolved swap offset of this role under the fixed geometry.
pub fn schedule_swap_offset(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    role: Role,
) -> Result<i64, ExperimentError> {
    let inst = make_instance(EXPERIMENT_SEED_BASE, Pool::Eval, task);
    let cache = cache_context(params, cfg, &inst)?;
    Ok(swap_offset(&cache, role)?)
}

/// Serial end-to-end position-independence run.
pub fn run_position_independence(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &PositionOptions,
) -> Result<ExperimentReport, ExperimentError> {
    let outcomes: Result<Vec<_>, _> = (0..opts.n_instances)
        .map(|i| position_instance_outcome(params, cfg, task, opts, i))
        .collect();
    let swap_at = schedule_swap_offset(params, cfg, task, opts.role)?;
    Ok(aggregate_position(
        &outcomes?,
        opts,
        swap_at,
        params.fingerprint(cfg),
    ))
}

// ---------------------------------------------------------------------------
// Mean interventions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MeanCondition {
    None,
    O,
    I,
    C,
    OI,
    OIC,
}

pub const MEAN_CONDITIONS: [MeanCondition; 6] = [
    MeanCondition::None,
    MeanCondition::O,
    MeanCondition::I,
    MeanCondition::C,
    MeanCondition::OI,
    MeanCondition::OIC,
];

impl MeanCondition {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::O => "o",
            Self::I => "i",
            Self::C => "c",
            Self::OI => "oi",
            Self::OIC => "oic",
        }
    }

    pub fn roles(self) -> &'static [Role] {
        match self {
            Self::None => &[],
            Self::O => &[Role::Object],
            Self::I => &[Role::Item],
            Self::C => &[Role::Color],
            Self::OI => &[Role::Object, Role::Item],
            Self::OIC => &[Role::Object, Role::Item, Role::Color],
        }
    }
}

/// Estimated deltas for all three roles plus norm-matched random controls.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    pub object: DeltaVectors,
    pub color: DeltaVectors,
    pub item: DeltaVectors,
    pub object_random: DeltaVectors,
    pub color_random: DeltaVectors,
    pub item_random: DeltaVectors,
}

impl DeltaSet {
    pub fn get(&self, role: Role, random: bool) -> &DeltaVectors {
        match (role, random) {
            (Role::Object, false) => &self.object,
            (Role::Color, false) => &self.color,
            (Role::Item, false) => &self.item,
            (Role::Object, true) => &self.object_random,
            (Role::Color, true) => &self.color_random,
            (Role::Item, true) => &self.item_random,
        }
    }
}

/// Estimate all three roles' deltas from the estimation pool and derive the
/// random controls.
pub fn estimate_delta_set(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    n_pairs: usize,
    seed: u64,
    object_padding: usize,
) -> Result<DeltaSet, ExperimentError> {
    let seeds: Vec<u64> = (0..n_pairs as u64).map(|i| seed ^ (i << 16) ^ i).collect();
    let object = estimate_deltas(
        params,
        cfg,
        task,
        &seeds,
        Role::Object,
        DeltaMatch::Full,
        object_padding,
        crate::intervene::DEFAULT_MIN_PAIRS.min(n_pairs),
    )?;
    let color = estimate_deltas(
        params,
        cfg,
        task,
        &seeds,
        Role::Color,
        DeltaMatch::Full,
        0,
        crate::intervene::DEFAULT_MIN_PAIRS.min(n_pairs),
    )?;
    let item = estimate_deltas(
        params,
        cfg,
        task,
        &seeds,
        Role::Item,
        DeltaMatch::Full,
        0,
        crate::intervene::DEFAULT_MIN_PAIRS.min(n_pairs),
    )?;
    Ok(DeltaSet {
        object_random: random_control_vectors(&object, seed ^ 0xABCD),
        color_random: random_control_vectors(&color, seed ^ 0xBCDE),
        item_random: random_control_vectors(&item, seed ^ 0xCDEF),
        object,
        color,
        item,
    })
}

#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanInterventionOptions {
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for MeanInterventionOptions {
    fn default() -> Self {
        Self {
            n_instances: DEFAULT_N_INSTANCES,
            seed: 0,
        }
    }
}

/// Per-instance correctness of both bindings under every condition, for
/// mean vectors and random controls.
#[derive(Debug, Clone)]
pub struct MeanInstanceOutcome {
    /// `[condition][vector kind (0 mean, 1 random)][tuple]`.
    pub correct: [[[bool; 2]; 2]; 6],
}

pub fn mean_instance_outcome(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    deltas: &DeltaSet,
    opts: &MeanInterventionOptions,
    index: usize,
) -> Result<MeanInstanceOutcome, ExperimentError> {
    let seed = EXPERIMENT_SEED_BASE + (1 << 28) + (opts.seed << 20) + index as u64;
    let inst = make_instance(seed, Pool::Eval, task);
    let cache = cache_context(params, cfg, &inst)?;
    let mut correct = [[[false; 2]; 2]; 6];
    for (ci, cond) in MEAN_CONDITIONS.iter().enumerate() {
        for (vi, random) in [(0usize, false), (1usize, true)] {
            if *cond == MeanCondition::None && random {
                // The None condition applies no vectors; reuse the mean run.
                correct[ci][vi] = correct[ci][0];
                continue;
            }
            let dvs: Vec<&DeltaVectors> =
                cond.roles().iter().map(|&r| deltas.get(r, random)).collect();
            let edited = if dvs.is_empty() {
                cache.clone()
            } else {
                apply_mean_intervention(&cache, &dvs, SignScheme::Forward)?
            };
            let frozen = freeze_context(params, cfg, &edited)?;
            for k in 0..2 {
                let shape = inst.scene.objects[k].shape;
                let logits = frozen_query(params, cfg, &frozen, &question_tokens(shape))?;
                let (l0, l1) =
                    two_way_logprobs(&logits, inst.item_token(0), inst.item_token(1));
                correct[ci][vi][k] = if k == 0 { l0 > l1 } else { l1 > l0 };
            }
        }
    }
    Ok(MeanInstanceOutcome { correct })
}

pub fn aggregate_mean_interventions(
    outcomes: &[MeanInstanceOutcome],
    opts: &MeanInterventionOptions,
    fingerprint: u64,
) -> ExperimentReport {
    let n = outcomes.len().max(1) as f32;
    // accs[condition][vector kind][tuple]
    let mut accs = [[[0.0f32; 2]; 2]; 6];
    for o in outcomes {
        for ci in 0..6 {
            for vi in 0..2 {
                for k in 0..2 {
                    if o.correct[ci][vi][k] {
                        accs[ci][vi][k] += 1.0 / n;
                    }
                }
            }
        }
    }

    let mut values = Vec::with_capacity(24);
    let mut row_labels = Vec::new();
    for (ci, cond) in MEAN_CONDITIONS.iter().enumerate() {
        row_labels.push(cond.label().to_string());
        values.extend([
            accs[ci][0][0],
            accs[ci][0][1],
            accs[ci][1][0],
            accs[ci][1][1],
        ]);
    }
    let table = Grid {
        id: "mean_intervention_accuracy".to_string(),
        row_labels,
        col_labels: vec![
            "mean O0<->I0".to_string(),
            "mean O1<->I1".to_string(),
            "random O0<->I0".to_string(),
            "random O1<->I1".to_string(),
        ],
        values,
    };

    let none_acc = accs[0][0];
    let mut checks = Vec::new();
    let gates: [(MeanCondition, f32, CheckOp); 6] = [
        (MeanCondition::None, thresholds::MEAN_NONE_MIN, CheckOp::AtLeast),
        (MeanCondition::O, thresholds::MEAN_O_MAX, CheckOp::AtMost),
        (MeanCondition::I, thresholds::MEAN_I_MAX, CheckOp::AtMost),
        (MeanCondition::C, thresholds::MEAN_C_MIN, CheckOp::AtLeast),
        (MeanCondition::OI, thresholds::MEAN_OI_MIN, CheckOp::AtLeast),
        (MeanCondition::OIC, thresholds::MEAN_OIC_MIN, CheckOp::AtLeast),
    ];
    for (cond, threshold, op) in gates {
        let ci = MEAN_CONDITIONS.iter().position(|c| *c == cond).unwrap();
        for k in 0..2 {
            checks.push(Check::new(
                &format!("mean_{}_binding{k}", cond.label()),
                format!(
                    "mean vectors, condition {}: accuracy on binding O{k}<->I{k}",
                    cond.label()
                ),
                accs[ci][0][k],
                threshold,
                op,
            ));
        }
    }
    for (ci, cond) in MEAN_CONDITIONS.iter().enumerate().skip(1) {
        for k in 0..2 {
            checks.push(Check::new(
                &format!("random_{}_binding{k}", cond.label()),
                format!(
                    "random controls, condition {}: drift from the None condition",
                    cond.label()
                ),
                (accs[ci][1][k] - none_acc[k]).abs(),
                thresholds::RANDOM_CONTROL_TOL,
                CheckOp::AtMost,
            ));
        }
    }

    ExperimentReport {
        experiment: "mean_interventions".to_string(),
        config: vec![
            ("n_instances".to_string(), format!("{}", opts.n_instances)),
            ("seed".to_string(), format!("{}", opts.seed)),
        ],
        checkpoint_fingerprint: fingerprint,
        n_samples: outcomes.len(),
        grids: Vec::new(),
        curves: Vec::new(),
        tables: vec![table],
        checks,
    }
}

/// Serial end-to-end mean-intervention run.
pub fn run_mean_interventions(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    deltas: &DeltaSet,
    opts: &MeanInterventionOptions,
) -> Result<ExperimentReport, ExperimentError> {
    let outcomes: Result<Vec<_>, _> = (0..opts.n_instances)
        .map(|i| mean_instance_outcome(params, cfg, task, deltas, opts, i))
        .collect();
    Ok(aggregate_mean_interventions(
        &outcomes?,
        opts,
        params.fingerprint(cfg),
    ))
}

// ---------------------------------------------------------------------------
// Delta stability
// ---------------------------------------------------------------------------

/// Layers counted as "middle" for the stability gate.
pub fn middle_layers(n_layers: usize) -> Vec<usize> {
    if n_layers <= 2 {
        (0..n_layers).collect()
    } else {
        (1..n_layers - 1).collect()
    }
}

/// Split-half stability: estimate a role's deltas from two disjoint seed
/// sets and report per-layer cosine similarity plus the middle-layer checks.
pub fn delta_split_half(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    role: Role,
    half_size: usize,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let padding = crate::intervene::default_padding(role);
    let seeds_a: Vec<u64> = (0..half_size as u64).map(|i| seed ^ (i << 17) ^ i).collect();
    let seeds_b: Vec<u64> = (0..half_size as u64)
        .map(|i| (seed ^ 0x5A5A5A5A) ^ (i << 17) ^ i)
        .collect();
    let da = estimate_deltas(
        params, cfg, task, &seeds_a, role, DeltaMatch::Full, padding, half_size,
    )?;
    let db = estimate_deltas(
        params, cfg, task, &seeds_b, role, DeltaMatch::Full, padding, half_size,
    )?;
    let cosines: Vec<f32> = (0..cfg.n_layers)
        .map(|l| layer_cosine(&da, &db, l))
        .collect();
    let mut checks = Vec::new();
    for l in middle_layers(cfg.n_layers) {
        checks.push(Check::new(
            &format!("delta_{}_cos_layer{l}", role_tag(role)),
            format!(
                "split-half cosine of {} deltas at layer {l}",
                role_tag(role)
            ),
            cosines[l],
            thresholds::DELTA_SPLIT_COS_MIN,
            CheckOp::AtLeast,
        ));
    }
    Ok(ExperimentReport {
        experiment: "delta_stability".to_string(),
        config: vec![
            ("role".to_string(), role_tag(role).to_string()),
            ("half_size".to_string(), format!("{half_size}")),
            ("seed".to_string(), format!("{seed}")),
        ],
        checkpoint_fingerprint: params.fingerprint(cfg),
        n_samples: half_size * 2,
        grids: Vec::new(),
        curves: vec![Curve {
            id: format!("delta_cosine_{}", role_tag(role)),
            x_label: "layer".to_string(),
            x: (0..cfg.n_layers).map(|l| l as f32).collect(),
            series: vec![Series {
                label: "split-half cosine".to_string(),
                values: cosines,
            }],
        }],
        tables: Vec::new(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ModelConfig, ModelParams, TaskConfig) {
        let cfg = ModelConfig::tiny(2, 32, 2);
        let params = ModelParams::init(&cfg, 7);
        (cfg, params, TaskConfig::default())
    }

    #[test]
    fn factorizability_report_shape() {
        let (cfg, params, task) = setup();
        let opts = FactorizabilityOptions {
            n_pairs: 3,
            ..FactorizabilityOptions::new(Role::Object)
        };
        let report = run_factorizability(&params, &cfg, &task, &opts).unwrap();
        assert_eq!(report.grids.len(), 4);
        for g in &report.grids {
            assert_eq!(g.row_labels.len(), 4);
            assert_eq!(g.col_labels.len(), 2);
            assert_eq!(g.values.len(), 8);
        }
        assert_eq!(report.n_samples, 3);
        assert_eq!(report.checks.len(), 1);
    }

    #[test]
    fn reports_are_deterministic() {
        let (cfg, params, task) = setup();
        let opts = FactorizabilityOptions {
            n_pairs: 2,
            ..FactorizabilityOptions::new(Role::Color)
        };
        let a = run_factorizability(&params, &cfg, &task, &opts).unwrap();
        let b = run_factorizability(&params, &cfg, &task, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_offset_matches_baseline() {
        let (cfg, params, task) = setup();
        let opts = PositionOptions {
            n_instances: 1,
            schedule: vec![ScheduleStep::Offset(0)],
            ..PositionOptions::new(Role::Object)
        };
        let o = position_instance_outcome(&params, &cfg, &task, &opts, 0).unwrap();
        // Zero offset = untouched cache; recompute directly.
        let seed = EXPERIMENT_SEED_BASE + (opts.seed << 24);
        let inst = make_instance(seed, Pool::Eval, &task);
        let cache = cache_context(&params, &cfg, &inst).unwrap();
        let frozen = freeze_context(&params, &cfg, &cache).unwrap();
        let logits = frozen_query(
            &params,
            &cfg,
            &frozen,
            &question_tokens(inst.scene.objects[0].shape),
        )
        .unwrap();
        let (l0, l1) = two_way_logprobs(&logits, inst.item_token(0), inst.item_token(1));
        assert_eq!(o.logps[0][0][0], l0);
        assert_eq!(o.logps[0][0][1], l1);
    }

    #[test]
    fn position_schedule_steps_map_to_curve_points() {
        let (cfg, params, task) = setup();
        let opts = PositionOptions {
            n_instances: 2,
            ..PositionOptions::new(Role::Item)
        };
        let report = run_position_independence(&params, &cfg, &task, &opts).unwrap();
        assert_eq!(report.curves.len(), 1);
        let curve = &report.curves[0];
        assert_eq!(curve.x.len(), opts.schedule.len());
        assert_eq!(curve.series.len(), 4);
        // Swap offset of text roles under the fixed template is 7 tokens.
        assert_eq!(*curve.x.last().unwrap(), 7.0);
    }

    #[test]
    fn schedule_collisions_error_for_object_spans() {
        let (cfg, params, task) = setup();
        // The object span gap is 117 positions; +-59 makes targets collide.
        let opts = PositionOptions {
            n_instances: 1,
            schedule: vec![ScheduleStep::Offset(59)],
            ..PositionOptions::new(Role::Object)
        };
        // Offsets that cross are fine for disjoint targets, so look for an
        // actual duplicate: +-117/2 rounds onto the same position only when
        // the spans meet exactly; use the text roles instead (gap 7).
        let opts_text = PositionOptions {
            n_instances: 1,
            schedule: vec![ScheduleStep::Offset(100)],
            ..PositionOptions::new(Role::Item)
        };
        // Either the object mid-point or a huge text offset must collide
        // (targets land on each other or go negative -> both are errors).
        let r1 = position_instance_outcome(&params, &cfg, &task, &opts, 0);
        let r2 = position_instance_outcome(&params, &cfg, &task, &opts_text, 0);
        assert!(r1.is_err() || r2.is_err());
    }

    #[test]
    fn mean_intervention_table_is_consistent_with_outcomes() {
        let (cfg, params, task) = setup();
        let deltas = estimate_delta_set(&params, &cfg, &task, 4, 3, 1).unwrap();
        let opts = MeanInterventionOptions {
            n_instances: 3,
            seed: 0,
        };
        let outcomes: Vec<_> = (0..opts.n_instances)
            .map(|i| mean_instance_outcome(&params, &cfg, &task, &deltas, &opts, i).unwrap())
            .collect();
        let report = aggregate_mean_interventions(&outcomes, &opts, 0);
        let table = &report.tables[0];
        // Aggregation consistency: recompute accuracy instance-wise.
        for (ci, _) in MEAN_CONDITIONS.iter().enumerate() {
            for k in 0..2 {
                let fraction = outcomes
                    .iter()
                    .filter(|o| o.correct[ci][0][k])
                    .count() as f32
                    / outcomes.len() as f32;
                assert_eq!(table.values[ci * 4 + k], fraction);
            }
        }
    }

    #[test]
    fn delta_stability_reports_middle_layers() {
        let (cfg, params, task) = setup();
        let report = delta_split_half(&params, &cfg, &task, Role::Item, 4, 1).unwrap();
        // L=2 counts every layer as middle.
        assert_eq!(report.checks.len(), 2);
        assert_eq!(report.curves[0].series[0].values.len(), 2);
    }

    #[test]
    fn middle_layer_selection() {
        assert_eq!(middle_layers(4), vec![1, 2]);
        assert_eq!(middle_layers(2), vec![0, 1]);
        assert_eq!(middle_layers(1), vec![0]);
    }
}
