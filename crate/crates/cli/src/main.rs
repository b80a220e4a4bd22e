//! shapelab: generate Shapes-task data, train the toy vision-language
//! model, and run the binding intervention experiments.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shapelab::metricsio::write_metrics_csv;
use shapelab::parallel::{default_threads, ThreadedRunner};
use shapelab::reportio::{load_report, render_report_files, save_report};
use shapelab::runner;
use shapelab::tensorio::{load_checkpoint, load_deltas, save_checkpoint, save_deltas};
use shapelab::{dataset, reportio};
use shapelab_core::experiment::{
    delta_split_half, FactorizabilityOptions, MeanInterventionOptions, PositionOptions,
    ScheduleStep, DEFAULT_N_DELTA_PAIRS,
};
use shapelab_core::intervene::{default_padding, LayerSet};
use shapelab_core::model::ModelConfig;
use shapelab_core::shapes::{generate, Pool, Role, TaskConfig};
use shapelab_core::train::{self, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "shapelab", version, about = "Toy VLM binding laboratory")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Eval,
    Estimation,
}

impl From<PoolArg> for Pool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Eval => Pool::Eval,
            PoolArg::Estimation => Pool::Estimation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Object,
    Color,
    Item,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Object => Role::Object,
            RoleArg::Color => Role::Color,
            RoleArg::Item => Role::Item,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Export generated instances as JSON lines (optionally PNGs).
    Gen {
        #[arg(long, value_enum, default_value = "eval")]
        pool: PoolArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PNG per instance into this directory.
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
    /// Train the toy model until the held-out accuracy gate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh held-out instances.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed_offset: u64,
    },
    /// Binding difference vectors.
    Deltas {
        #[command(subcommand)]
        cmd: DeltasCmd,
    },
    /// Causal intervention experiments.
    Intervene {
        #[command(subcommand)]
        cmd: Intervene,
    },
    /// Report file utilities.
    Report {
        #[command(subcommand)]
        cmd: ReportCmd,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    eval_interval: usize,
    #[arg(long, default_value_t = 256)]
    eval_size: usize,
    #[arg(long, default_value_t = 0.95)]
    target_acc: f32,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DeltasCmd {
    /// Estimate per-role difference vectors from the estimation pool.
    Estimate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Restrict to one role (default: all three).
        #[arg(long, value_enum)]
        role: Option<RoleArg>,
        #[arg(long, default_value_t = DEFAULT_N_DELTA_PAIRS)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch-ring padding for the object role.
        #[arg(long, default_value_t = 1)]
        padding: usize,
        /// Average the vectors across within-span offsets before saving.
        #[arg(long)]
        mean_pool: bool,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split-half stability of the estimated vectors.
    Stability {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, default_value_t = 50)]
        half_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out_dir: PathBuf,
        /// Exit nonzero if any committed threshold fails.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Subcommand)]
enum Intervene {
    /// Activation splices between two contexts, all four conditions.
    Factorizability {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        /// Patch-ring width (object role); token padding for text roles.
        #[arg(long)]
        padding: Option<usize>,
        /// Run paddings 0..=3 and write one report per width.
        #[arg(long)]
        padding_sweep: bool,
        /// Restrict splices to a layer subset, e.g. `0,1`.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// RoPE position remapping sweeps.
    Position {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Comma list of offsets plus `swap`, e.g. `0,1,2,4,swap`.
        #[arg(long, default_value = "0,1,2,4,swap")]
        schedule: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Mean binding-vector interventions (plus random controls).
    Mean {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding deltas_{object,color,item}.sltc; estimated on
        /// the fly when absent.
        #[arg(long)]
        deltas_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_N_DELTA_PAIRS)]
        pairs: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        multi_crop: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Re-emit the CSV and plot files from a report JSON.
    Render {
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_schedule(text: &str) -> Result<Vec<ScheduleStep>> {
    text.split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok.eq_ignore_ascii_case("swap") {
                Ok(ScheduleStep::Swap)
            } else {
                tok.parse::<i64>()
                    .map(ScheduleStep::Offset)
                    .map_err(|_| anyhow!("bad schedule entry {tok:?}"))
            }
        })
        .collect()
}

fn parse_layers(text: &str) -> Result<LayerSet> {
    let layers: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse()).collect();
    Ok(LayerSet::Subset(layers.context("bad --layers list")?))
}

fn finish_checked(report: &shapelab_core::experiment::ExperimentReport, check: bool) -> Result<()> {
    if check {
        let ok = runner::print_checks(report);
        if !ok {
            bail!("one or more committed thresholds failed");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    shapelab::parallel::tune_allocator();
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(default_threads);

    match cli.command {
        Command::Gen {
            pool,
            n,
            seed,
            multi_crop,
            out,
            png_dir,
        } => {
            let task = TaskConfig { multi_crop };
            let instances: Vec<_> = (0..n as u64)
                .map(|i| generate::make_instance(seed + i, pool.into(), &task))
                .collect();
            dataset::export_jsonl(&out, &instances)?;
            if let Some(dir) = png_dir {
                std::fs::create_dir_all(&dir)?;
                for inst in &instances {
                    dataset::write_png(&dir.join(format!("{}.png", inst.seed)), &inst.image)?;
                }
            }
            println!("wrote {n} instances to {}", out.display());
        }
        Command::Train(args) => {
            let tc = TrainConfig {
                steps: args.steps,
                batch: args.batch,
                lr: args.lr,
                seed: args.seed,
                eval_interval: args.eval_interval,
                eval_size: args.eval_size,
                target_acc: args.target_acc,
                ..TrainConfig::default()
            };
            let cfg = ModelConfig::default();
            let runner_impl = ThreadedRunner::new(threads);
            let started = Instant::now();
            let mut print_row = |row: &shapelab_core::train::MetricsRow| {
                println!(
                    "step {:>6}  loss {:.4}  eval_acc {:.4}  eval_loss {:.4}  [{:.0}s]",
                    row.step,
                    row.loss,
                    row.accuracy,
                    row.eval_loss,
                    started.elapsed().as_secs_f32()
                );
            };
            let (outcome, reached) =
                match train::train(&tc, &cfg, &runner_impl, Some(&mut print_row)) {
                    Ok(o) => (o, true),
                    Err(TrainError::TargetNotReached { outcome, .. }) => (*outcome, false),
                    Err(e) => return Err(anyhow!("{e}")),
                };
            save_checkpoint(&args.out, &cfg, &outcome.params)?;
            if let Some(metrics) = &args.metrics {
                write_metrics_csv(metrics, &outcome.metrics)?;
            }
            println!(
                "checkpoint: {} (fingerprint {:016x}, {} steps, {:.0}s)",
                args.out.display(),
                outcome.params.fingerprint(&cfg),
                outcome.steps_run,
                started.elapsed().as_secs_f32()
            );
            if !reached {
                bail!(
                    "target accuracy {} not reached within {} steps",
                    tc.target_acc,
                    tc.steps
                );
            }
        }
        Command::Eval {
            ckpt,
            n,
            seed_offset,
        } => {
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let runner_impl = ThreadedRunner::new(threads);
            let acc = train::evaluate(&params, &cfg, &runner_impl, n, seed_offset << 20)
                .map_err(|e| anyhow!("{e}"))?;
            println!("accuracy over {n} instances: {acc:.4}");
        }
        Command::Deltas { cmd } => match cmd {
            DeltasCmd::Estimate {
                ckpt,
                role,
                pairs,
                seed,
                padding,
                mean_pool,
                multi_crop,
                out_dir,
            } => {
                let (cfg, params) = load_checkpoint(&ckpt)?;
                let task = TaskConfig { multi_crop };
                std::fs::create_dir_all(&out_dir)?;
                let roles: Vec<Role> = match role {
                    Some(r) => vec![r.into()],
                    None => vec![Role::Object, Role::Color, Role::Item],
                };
                let seeds = runner::delta_seeds(pairs, seed);
                for role in roles {
                    let pad = if role == Role::Object { padding } else { 0 };
                    let mut dv = runner::estimate_deltas_threaded(
                        &params, &cfg, &task, &seeds, role, pad, threads,
                    )?;
                    if mean_pool {
                        dv = dv.mean_pooled();
                    }
                    let path = out_dir.join(format!(
                        "deltas_{}.sltc",
                        shapelab_core::experiment::role_tag(role)
                    ));
                    save_deltas(&path, &dv)?;
                    println!(
                        "{}: span {} x width {}, norms/layer {:?}",
                        path.display(),
                        dv.span_len,
                        dv.width,
                        dv.norms_per_layer
                    );
                }
            }
            DeltasCmd::Stability {
                ckpt,
                role,
                half_size,
                seed,
                multi_crop,
                out_dir,
                check,
            } => {
                let (cfg, params) = load_checkpoint(&ckpt)?;
                let task = TaskConfig { multi_crop };
                let report = delta_split_half(&params, &cfg, &task, role.into(), half_size, seed)
                    .map_err(|e| anyhow!("{e}"))?;
                let path = save_report(&out_dir, &report)?;
                println!("report: {}", path.display());
                finish_checked(&report, check)?;
            }
        },
        Command::Intervene { cmd } => match cmd {
            Intervene::Factorizability {
                ckpt,
                role,
                pairs,
                padding,
                padding_sweep,
                layers,
                seed,
                multi_crop,
                out_dir,
                check,
            } => {
                let (cfg, params) = load_checkpoint(&ckpt)?;
                let task = TaskConfig { multi_crop };
                let role: Role = role.into();
                let layer_set = match layers {
                    Some(text) => parse_layers(&text)?,
                    None => LayerSet::All,
                };
                let paddings: Vec<usize> = if padding_sweep {
                    (0..=3).collect()
                } else {
                    vec![padding.unwrap_or_else(|| default_padding(role))]
                };
                let mut failed = false;
                for pad in paddings {
                    let opts = FactorizabilityOptions {
                        role,
                        n_pairs: pairs,
                        padding: pad,
                        seed,
                        layers: layer_set.clone(),
                    };
                    let mut report =
                        runner::run_factorizability(&params, &cfg, &task, &opts, threads)?;
                    if padding_sweep {
                        report.experiment = format!("factorizability_pad{pad}");
                    }
                    let path = save_report(&out_dir, &report)?;
                    println!("padding {pad}: {}", path.display());
                    if check && !runner::print_checks(&report) {
                        failed = true;
                    }
                }
                if failed {
                    bail!("one or more committed thresholds failed");
                }
            }
            Intervene::Position {
                ckpt,
                role,
                n,
                schedule,
                seed,
                multi_crop,
                out_dir,
                check,
            } => {
                let (cfg, params) = load_checkpoint(&ckpt)?;
                let task = TaskConfig { multi_crop };
                let opts = PositionOptions {
                    role: role.into(),
                    n_instances: n,
                    schedule: parse_schedule(&schedule)?,
                    seed,
                };
                let report = runner::run_position(&params, &cfg, &task, &opts, threads)?;
                let path = save_report(&out_dir, &report)?;
                println!("report: {}", path.display());
                finish_checked(&report, check)?;
            }
            Intervene::Mean {
                ckpt,
                deltas_dir,
                pairs,
                n,
                seed,
                multi_crop,
                out_dir,
                check,
            } => {
                let (cfg, params) = load_checkpoint(&ckpt)?;
                let task = TaskConfig { multi_crop };
                let deltas = match &deltas_dir {
                    Some(dir) => {
                        let load = |r: &str| load_deltas(&dir.join(format!("deltas_{r}.sltc")));
                        let object = load("object")?;
                        let color = load("color")?;
                        let item = load("item")?;
                        shapelab_core::experiment::DeltaSet {
                            object_random: shapelab_core::intervene::random_control_vectors(
                                &object,
                                seed ^ 0xABCD,
                            ),
                            color_random: shapelab_core::intervene::random_control_vectors(
                                &color,
                                seed ^ 0xBCDE,
                            ),
                            item_random: shapelab_core::intervene::random_control_vectors(
                                &item,
                                seed ^ 0xCDEF,
                            ),
                            object,
                            color,
                            item,
                        }
                    }
                    None => runner::estimate_delta_set_threaded(
                        &params, &cfg, &task, pairs, seed, 1, threads,
                    )?,
                };
                let opts = MeanInterventionOptions {
                    n_instances: n,
                    seed,
                };
                let report =
                    runner::run_mean_interventions(&params, &cfg, &task, &deltas, &opts, threads)?;
                let path = save_report(&out_dir, &report)?;
                println!("report: {}", path.display());
                finish_checked(&report, check)?;
            }
        },
        Command::Report { cmd } => match cmd {
            ReportCmd::Render { json, out_dir } => {
                let report = load_report(&json)?;
                render_report_files(&out_dir, &report)?;
                println!(
                    "rendered {} files for {}",
                    out_dir.display(),
                    reportio::report_stem(&report)
                );
            }
        },
    }
    Ok(())
}
