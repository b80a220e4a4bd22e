//! Threaded drivers around the core per-instance experiment functions.
//!
//! Work is sharded by instance index and reduced in index order, so every
//! report is identical to the serial run whatever the thread count.

use anyhow::{anyhow, Result};

use shapelab_core::experiment::{
    aggregate_factorizability, aggregate_mean_interventions, aggregate_position,
    factorizability_pair_outcome, mean_instance_outcome, position_instance_outcome,
    schedule_swap_offset, DeltaSet, ExperimentReport, FactorizabilityOptions,
    MeanInterventionOptions, PositionOptions,
};
use shapelab_core::intervene::{
    delta_pair_diff, deltas_from_diffs, random_control_vectors, DeltaVectors,
};
use shapelab_core::model::{ModelConfig, ModelParams};
use shapelab_core::shapes::generate::DeltaMatch;
use shapelab_core::shapes::{Role, TaskConfig};

use crate::parallel::try_par_map;

pub fn run_factorizability(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &FactorizabilityOptions,
    threads: usize,
) -> Result<ExperimentReport> {
    let outcomes = try_par_map(opts.n_pairs, threads, |i| {
        factorizability_pair_outcome(params, cfg, task, opts, i)
    })
    .map_err(|e| anyhow!("{e}"))?;
    Ok(aggregate_factorizability(
        &outcomes,
        opts,
        params.fingerprint(cfg),
    ))
}

pub fn run_position(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    opts: &PositionOptions,
    threads: usize,
) -> Result<ExperimentReport> {
    let outcomes = try_par_map(opts.n_instances, threads, |i| {
        position_instance_outcome(params, cfg, task, opts, i)
    })
    .map_err(|e| anyhow!("{e}"))?;
    let swap_at = schedule_swap_offset(params, cfg, task, opts.role).map_err(|e| anyhow!("{e}"))?;
    Ok(aggregate_position(
        &outcomes,
        opts,
        swap_at,
        params.fingerprint(cfg),
    ))
}

/// Threaded delta estimation for one role; reproduces the serial
/// `estimate_deltas` bit for bit.
pub fn estimate_deltas_threaded(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    pair_seeds: &[u64],
    role: Role,
    padding: usize,
    threads: usize,
) -> Result<DeltaVectors> {
    let diffs = try_par_map(pair_seeds.len(), threads, |i| {
        delta_pair_diff(
            params,
            cfg,
            task,
            pair_seeds[i],
            role,
            DeltaMatch::Full,
            padding,
        )
    })
    .map_err(|e| anyhow!("{e}"))?;
    deltas_from_diffs(cfg, role, padding, pair_seeds, &diffs).map_err(|e| anyhow!("{e}"))
}

/// Seeds used for a delta estimation run.
pub fn delta_seeds(n_pairs: usize, seed: u64) -> Vec<u64> {
    (0..n_pairs as u64).map(|i| seed ^ (i << 16) ^ i).collect()
}

/// Estimate all three roles plus random controls, threaded.
pub fn estimate_delta_set_threaded(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    n_pairs: usize,
    seed: u64,
    object_padding: usize,
    threads: usize,
) -> Result<DeltaSet> {
    let seeds = delta_seeds(n_pairs, seed);
    let object =
        estimate_deltas_threaded(params, cfg, task, &seeds, Role::Object, object_padding, threads)?;
    let color = estimate_deltas_threaded(params, cfg, task, &seeds, Role::Color, 0, threads)?;
    let item = estimate_deltas_threaded(params, cfg, task, &seeds, Role::Item, 0, threads)?;
    Ok(DeltaSet {
        object_random: random_control_vectors(&object, seed ^ 0xABCD),
        color_random: random_control_vectors(&color, seed ^ 0xBCDE),
        item_random: random_control_vectors(&item, seed ^ 0xCDEF),
        object,
        color,
        item,
    })
}

pub fn run_mean_interventions(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &TaskConfig,
    deltas: &DeltaSet,
    opts: &MeanInterventionOptions,
    threads: usize,
) -> Result<ExperimentReport> {
    let outcomes = try_par_map(opts.n_instances, threads, |i| {
        mean_instance_outcome(params, cfg, task, deltas, opts, i)
    })
    .map_err(|e| anyhow!("{e}"))?;
    Ok(aggregate_mean_interventions(
        &outcomes,
        opts,
        params.fingerprint(cfg),
    ))
}

/// Print one line per check; true when everything passed.
pub fn print_checks(report: &ExperimentReport) -> bool {
    let mut all = true;
    for c in &report.checks {
        let op = match c.op {
            shapelab_core::experiment::CheckOp::AtLeast => ">=",
            shapelab_core::experiment::CheckOp::AtMost => "<=",
        };
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {}: {:.4} {op} {:.4}  ({})",
            c.id, c.value, c.threshold, c.description
        );
        all &= c.passed;
    }
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapelab_core::intervene::estimate_deltas;

    /// Threaded reports equal serial ones regardless of worker count.
    #[test]
    fn threaded_experiments_match_serial() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 3);
        let task = TaskConfig::default();

        let fopts = FactorizabilityOptions {
            n_pairs: 3,
            ..FactorizabilityOptions::new(Role::Object)
        };
        let serial =
            shapelab_core::experiment::run_factorizability(&params, &cfg, &task, &fopts).unwrap();
        for threads in [1, 2, 3] {
            let par = run_factorizability(&params, &cfg, &task, &fopts, threads).unwrap();
            assert_eq!(par, serial, "threads={threads}");
        }

        let popts = PositionOptions {
            n_instances: 3,
            ..PositionOptions::new(Role::Item)
        };
        let serial =
            shapelab_core::experiment::run_position_independence(&params, &cfg, &task, &popts)
                .unwrap();
        let par = run_position(&params, &cfg, &task, &popts, 2).unwrap();
        assert_eq!(par, serial);
    }

    #[test]
    fn threaded_delta_estimation_matches_serial() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 4);
        let task = TaskConfig::default();
        let seeds = delta_seeds(5, 7);
        let serial = estimate_deltas(
            &params,
            &cfg,
            &task,
            &seeds,
            Role::Item,
            DeltaMatch::Full,
            0,
            5,
        )
        .unwrap();
        let par =
            estimate_deltas_threaded(&params, &cfg, &task, &seeds, Role::Item, 0, 2).unwrap();
        assert_eq!(serial.data, par.data);
        assert_eq!(serial.n_pairs, par.n_pairs);
    }
}
