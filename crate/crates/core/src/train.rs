//! Training loop, Adam optimizer and evaluation for the Shapes task.
//!
//! The curriculum interleaves both vocabulary pools and both crop settings
//! so every experiment configuration stays in-distribution. Answer
//! supervision happens only at the answer-marker position. Gradients are
//! accumulated per instance in index order, so a parallel runner that
//! shards the batch reproduces the serial result bit for bit.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::mathf;
use crate::model::{
    bind_params, embed_prompt, forward, AttnMask, ModelConfig, ModelError, ModelParams,
};
use crate::rng::Pcg32;
use crate::shapes::{generate, Pool, ShapesInstance, TaskConfig};
use crate::tensor::{Graph, Tensor};

/// Seed range bases; training draws never collide with held-out draws.
pub const TRAIN_SEED_BASE: u64 = 1 << 33;
pub const EVAL_SEED_BASE: u64 = 1 << 40;

/// Curriculum mix: one instance in N comes from the estimation pool / uses
/// multi-crop tokens. Both pools and both crop settings stay represented;
/// the skew toward the evaluation pool and base crops concentrates early
/// learning on the distribution every experiment gates on.
const EST_POOL_ONE_IN: u64 = 3;
const MULTI_CROP_ONE_IN: u64 = 8;

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    BadConfig(&'static str),
    /// Step budget exhausted before the accuracy gate was reached.
    TargetNotReached {
        target: f32,
        best: f32,
        steps: usize,
        outcome: Box<TrainOutcome>,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::BadConfig(m) => write!(f, "bad train config: {m}"),
            Self::TargetNotReached {
                target,
                best,
                steps,
                ..
            } => write!(
                f,
                "target accuracy {target} not reached in {steps} steps (best {best})"
            ),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub eval_interval: usize,
    pub eval_size: usize,
    pub target_acc: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 3e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_interval: 25,
            eval_size: 256,
            target_acc: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch == 0 || self.eval_interval == 0 || self.eval_size == 0 {
            return Err(TrainError::BadConfig("zero-sized budget"));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) {
            return Err(TrainError::BadConfig("negative lr or eps"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(TrainError::BadConfig("betas must be in [0, 1)"));
        }
        if !(self.target_acc > 0.0 && self.target_acc <= 1.0) {
            return Err(TrainError::BadConfig("target accuracy must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training-batch loss at this step.
    pub loss: f32,
    /// Accuracy on the frozen held-out set.
    pub accuracy: f32,
    /// Mean loss on the frozen held-out set.
    pub eval_loss: f32,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
    pub reached_target: bool,
    pub steps_run: usize,
}

/// Summed gradients over a batch plus the summed loss.
pub struct BatchGrads {
    pub loss_sum: f32,
    pub n: usize,
    pub grads: Vec<Vec<f32>>,
}

impl BatchGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            loss_sum: 0.0,
            n: 0,
            grads: params
                .named()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect(),
        }
    }

    /// Fold another accumulation in; callers reduce in instance index order
    /// to keep results bit-deterministic.
    pub fn merge(&mut self, other: &BatchGrads) {
        self.loss_sum += other.loss_sum;
        self.n += other.n;
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, Copy)]
pub struct InstanceEval {
    pub correct: bool,
    pub loss: f32,
}

fn instance_graph(
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &ShapesInstance,
    with_grads: bool,
) -> Result<(Graph, crate::model::ParamVars, crate::tensor::Var, Vec<f32>), ModelError> {
    let mut g = if with_grads {
        Graph::new()
    } else {
        Graph::inference()
    };
    let pv = bind_params(&mut g, params);
    let emb = embed_prompt(&mut g, &pv, cfg, inst)?;
    let positions: Vec<i64> = (0..inst.tokens.len() as i64).collect();
    let out = forward(&mut g, &pv, cfg, emb, &positions, &AttnMask::Causal)?;
    let p = inst.tokens.len();
    let answer_row = g.slice(out.logits, [p - 1, 0], [p, cfg.vocab_size])?;
    let logp = g.log_softmax(answer_row, 1)?;
    let mut onehot = vec![0.0f32; cfg.vocab_size];
    onehot[inst.answer_item_token as usize] = 1.0;
    let target = g.constant(Tensor::from_vec(vec![1, cfg.vocab_size], onehot)?);
    let picked = g.mul(logp, target)?;
    let nll_sum = g.sum(picked);
    let loss = g.scale(nll_sum, -1.0);
    let answer_logits = g.value(answer_row).data().to_vec();
    Ok((g, pv, loss, answer_logits))
}

/// Cross-entropy (full vocabulary) of one instance's answer position, plus
/// per-parameter gradients.
pub fn instance_loss_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &ShapesInstance,
) -> Result<(f32, Vec<Vec<f32>>), ModelError> {
    let (mut g, pv, loss, _) = instance_graph(params, cfg, inst, true)?;
    let loss_val = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = pv
        .ordered()
        .iter()
        .map(|&v| {
            g.take_grad(v)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    Ok((loss_val, grads))
}

/// Loss of one instance without gradients.
pub fn instance_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &ShapesInstance,
) -> Result<f32, ModelError> {
    let (g, _, loss, _) = instance_graph(params, cfg, inst, false)?;
    Ok(g.value(loss).data()[0])
}

/// Loss plus two-way correctness: the bound item's log probability must
/// beat the context's distractor item.
pub fn instance_eval(
    params: &ModelParams,
    cfg: &ModelConfig,
    inst: &ShapesInstance,
) -> Result<InstanceEval, ModelError> {
    let (g, _, loss, answer_logits) = instance_graph(params, cfg, inst, false)?;
    let correct_tok = inst.answer_item_token;
    let distractor = inst.item_token(1 - inst.queried_k);
    let correct = answer_logits[correct_tok as usize] > answer_logits[distractor as usize];
    Ok(InstanceEval {
        correct,
        loss: g.value(loss).data()[0],
    })
}

/// Gradient accumulation over a batch, serially, in index order.
pub fn batch_grads_serial(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[ShapesInstance],
) -> Result<BatchGrads, ModelError> {
    let mut acc = BatchGrads::zeros_like(params);
    for inst in batch {
        let (loss, grads) = instance_loss_grads(params, cfg, inst)?;
        acc.loss_sum += loss;
        acc.n += 1;
        for (dst, src) in acc.grads.iter_mut().zip(&grads) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(acc)
}

/// Hook for running batch work; implementations must reproduce the serial
/// result exactly (shard per instance, reduce in index order).
pub trait BatchRunner: Sync {
    fn batch_grads(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        batch: &[ShapesInstance],
    ) -> Result<BatchGrads, ModelError>;

    fn evaluate(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        instances: &[ShapesInstance],
    ) -> Result<Vec<InstanceEval>, ModelError>;
}

/// Single-threaded reference runner.
pub struct SerialRunner;

impl BatchRunner for SerialRunner {
    fn batch_grads(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        batch: &[ShapesInstance],
    ) -> Result<BatchGrads, ModelError> {
        batch_grads_serial(params, cfg, batch)
    }

    fn evaluate(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        instances: &[ShapesInstance],
    ) -> Result<Vec<InstanceEval>, ModelError> {
        instances
            .iter()
            .map(|i| instance_eval(params, cfg, i))
            .collect()
    }
}

/// The training instance for `(step, slot)`: deterministic in the train
/// seed, mixing pools and crop settings.
pub fn training_instance(train_seed: u64, step: usize, slot: usize) -> ShapesInstance {
    let mut mix = Pcg32::new(
        train_seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15),
        0xC0FFEE ^ slot as u64,
    );
    let pool = if mix.next_u64() % EST_POOL_ONE_IN == 0 {
        Pool::Estimation
    } else {
        Pool::Eval
    };
    let multi_crop = mix.next_u64() % MULTI_CROP_ONE_IN == 0;
    let seed = TRAIN_SEED_BASE ^ mix.next_u64();
    generate::make_instance(seed, pool, &TaskConfig { multi_crop })
}

/// The frozen held-out set: evaluation pool, base crops, disjoint seeds.
pub fn eval_instances(n: usize, seed_offset: u64) -> Vec<ShapesInstance> {
    (0..n as u64)
        .map(|i| {
            generate::make_instance(
                EVAL_SEED_BASE + seed_offset + i,
                Pool::Eval,
                &TaskConfig::default(),
            )
        })
        .collect()
}

/// Adam with bias correction; `lr = 0` leaves parameters bit-identical.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f32>], tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - mathf::powf(tc.beta1, self.t as f32);
        let bc2 = 1.0 - mathf::powf(tc.beta2, self.t as f32);
        for (idx, (_, tensor)) in params.named_mut().into_iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = Arc::make_mut(tensor).data_mut();
            for i in 0..data.len() {
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= tc.lr * mhat / (mathf::sqrtf(vhat) + tc.eps);
            }
        }
    }
}

/// Train until the held-out accuracy gate or the step budget is hit.
///
/// Fails with [`TrainError::TargetNotReached`] (carrying the final outcome
/// for inspection) when the budget runs out first.
pub fn train(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    runner: &dyn BatchRunner,
    mut progress: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    cfg.validate()?;
    let mut params = ModelParams::init(cfg, tc.seed);
    let mut adam = Adam::new(&params);
    let eval_set = eval_instances(tc.eval_size, 0);
    let mut metrics = Vec::new();
    let mut best = 0.0f32;
    let mut reached = false;
    let mut steps_run = 0;

    for step in 1..=tc.steps {
        steps_run = step;
        let batch: Vec<ShapesInstance> = (0..tc.batch)
            .map(|slot| training_instance(tc.seed, step, slot))
            .collect();
        let bg = runner.batch_grads(&params, cfg, &batch)?;
        let inv = 1.0 / bg.n.max(1) as f32;
        let mean_grads: Vec<Vec<f32>> = bg
            .grads
            .iter()
            .map(|g| g.iter().map(|&x| x * inv).collect())
            .collect();
        adam.step(&mut params, &mean_grads, tc);
        let batch_loss = bg.loss_sum * inv;

        if step % tc.eval_interval == 0 || step == tc.steps {
            let evals = runner.evaluate(&params, cfg, &eval_set)?;
            let acc = evals.iter().filter(|e| e.correct).count() as f32 / evals.len() as f32;
            let eval_loss = evals.iter().map(|e| e.loss).sum::<f32>() / evals.len() as f32;
            let row = MetricsRow {
                step,
                loss: batch_loss,
                accuracy: acc,
                eval_loss,
            };
            if let Some(cb) = progress.as_deref_mut() {
                cb(&row);
            }
            metrics.push(row);
            best = best.max(acc);
            if acc >= tc.target_acc {
                reached = true;
                break;
            }
        }
    }

    let outcome = TrainOutcome {
        params,
        metrics,
        reached_target: reached,
        steps_run,
    };
    if reached {
        Ok(outcome)
    } else {
        Err(TrainError::TargetNotReached {
            target: tc.target_acc,
            best,
            steps: steps_run,
            outcome: Box::new(outcome),
        })
    }
}

/// Accuracy over `n` fresh held-out instances.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    runner: &dyn BatchRunner,
    n: usize,
    seed_offset: u64,
) -> Result<f32, ModelError> {
    let set = eval_instances(n, seed_offset);
    let evals = runner.evaluate(params, cfg, &set)?;
    Ok(evals.iter().filter(|e| e.correct).count() as f32 / evals.len().max(1) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny(1, 16, 2)
    }

    fn run_budget(tc: &TrainConfig, cfg: &ModelConfig) -> TrainOutcome {
        match train(tc, cfg, &SerialRunner, None) {
            Ok(o) => o,
            Err(TrainError::TargetNotReached { outcome, .. }) => *outcome,
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 1);
        // Zero unembedding makes every logit 0, hence a uniform softmax.
        params.unembed = Arc::new(Tensor::zeros(vec![cfg.width, cfg.vocab_size]));
        let inst = generate::make_instance(1, Pool::Eval, &TaskConfig::default());
        let loss = instance_loss(&params, &cfg, &inst).unwrap();
        let want = mathf::lnf(cfg.vocab_size as f32);
        assert!((loss - want).abs() < 1e-4, "{loss} vs {want}");
    }

    #[test]
    fn confident_correct_prediction_drives_loss_to_zero() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 2);
        let inst = generate::make_instance(2, Pool::Eval, &TaskConfig::default());
        // A large bias toward the answer column approximates a one-hot head.
        let mut u = Tensor::zeros(vec![cfg.width, cfg.vocab_size]);
        for r in 0..cfg.width {
            u.data_mut()[r * cfg.vocab_size + inst.answer_item_token as usize] = 2.0;
        }
        params.unembed = Arc::new(u);
        params.ln_f_b = Arc::new(Tensor::from_vec(vec![cfg.width], vec![1.0; cfg.width]).unwrap());
        let loss = instance_loss(&params, &cfg, &inst).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let cfg = tiny_cfg();
        let tc = TrainConfig {
            steps: 2,
            batch: 2,
            lr: 0.0,
            eval_interval: 10,
            eval_size: 4,
            ..TrainConfig::default()
        };
        let before = ModelParams::init(&cfg, tc.seed);
        let outcome = run_budget(&tc, &cfg);
        for ((_, a), (_, b)) in before.named().iter().zip(outcome.params.named().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fixed_seed_reproduces_metrics() {
        let cfg = tiny_cfg();
        let tc = TrainConfig {
            steps: 4,
            batch: 2,
            eval_interval: 2,
            eval_size: 4,
            ..TrainConfig::default()
        };
        let m1 = run_budget(&tc, &cfg).metrics;
        let m2 = run_budget(&tc, &cfg).metrics;
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.eval_loss.to_bits(), b.eval_loss.to_bits());
        }
    }

    #[test]
    fn training_mixes_pools_and_crops() {
        let mut pools = [0usize; 2];
        let mut crops = [0usize; 2];
        for step in 1..=40 {
            for slot in 0..2 {
                let inst = training_instance(0, step, slot);
                pools[(inst.scene.pool() == Pool::Estimation) as usize] += 1;
                crops[inst.scene.multi_crop as usize] += 1;
            }
        }
        assert!(pools[0] > 0 && pools[1] > 0, "pools {pools:?}");
        assert!(crops[0] > 0 && crops[1] > 0, "crops {crops:?}");
    }

    #[test]
    fn eval_seeds_are_disjoint_from_training_range() {
        for e in eval_instances(8, 0) {
            assert!(e.seed >= EVAL_SEED_BASE);
        }
    }

    /// Small but real run: eval-set loss strictly decreases over the first
    /// three eval intervals.
    #[test]
    fn eval_loss_decreases_over_first_intervals() {
        let cfg = ModelConfig::tiny(1, 32, 2);
        let tc = TrainConfig {
            steps: 12,
            batch: 8,
            lr: 1e-3,
            eval_interval: 4,
            eval_size: 16,
            ..TrainConfig::default()
        };
        let metrics = run_budget(&tc, &cfg).metrics;
        assert!(metrics.len() >= 3);
        assert!(metrics[1].eval_loss < metrics[0].eval_loss, "{metrics:?}");
        assert!(metrics[2].eval_loss < metrics[1].eval_loss, "{metrics:?}");
    }
}
