//! End-to-end runs: data generation, partitioning, strategy execution and
//! metrics files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::codec::Checkpoint;
use crate::config::{ExperimentConfig, PartitionConfig};
use crate::data::{
    dirichlet_partition, generate_gaussian_mixture_draw, pathological_partition, ClientShard,
    LabeledDataset, MixtureSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_csv, labelwise_accuracy, summary_csv, to_jsonl, write_file, RoundLog, RunSummary,
};
use crate::protocol::Simulation;
use crate::rng::{self, Stream};
use crate::scheduler::HeadSync;
use crate::split::SplitModel;
use crate::strategy::StrategySpec;

fn mixture(cfg: &ExperimentConfig, samples_per_class: usize) -> MixtureSpec {
    MixtureSpec {
        num_classes: cfg.dataset.classes,
        feature_dim: cfg.dataset.feature_dim,
        samples_per_class,
        class_separation: cfg.dataset.separation,
    }
}

/// Client shards for one seed. Identical for every strategy.
pub fn build_shards(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientShard>> {
    let pool = generate_gaussian_mixture_draw(&mixture(cfg, cfg.dataset.samples_per_class), seed, 0)?;
    match cfg.partition {
        PartitionConfig::Dirichlet { beta } => dirichlet_partition(&pool, cfg.clients, beta, seed),
        PartitionConfig::Pathological { classes_per_client } => {
            pathological_partition(&pool, cfg.clients, classes_per_client, seed)
        }
    }
}

/// A class-balanced test set drawn independently of the training pool.
pub fn uniform_test_set(cfg: &ExperimentConfig, seed: u64, per_class: usize) -> Result<LabeledDataset> {
    generate_gaussian_mixture_draw(&mixture(cfg, per_class), seed, 1)
}

pub fn initial_model(cfg: &ExperimentConfig, seed: u64) -> Result<SplitModel> {
    let mut rng = rng::stream(seed, Stream::Init, 0, 0);
    SplitModel::random(
        cfg.dataset.feature_dim,
        &cfg.model.hidden,
        cfg.model.embedding_dim,
        cfg.dataset.classes,
        &mut rng,
    )
}

pub fn new_simulation(cfg: &ExperimentConfig, spec: &StrategySpec, seed: u64) -> Result<Simulation> {
    Simulation::new(build_shards(cfg, seed)?, initial_model(cfg, seed)?, cfg.protocol(spec, seed))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: String,
    pub seed: u64,
    pub logs: Vec<RoundLog>,
    pub simulation: Simulation,
}

impl RunOutput {
    pub fn summary(&self) -> RunSummary {
        RunSummary::from_logs(&self.strategy, self.seed, &self.logs)
    }
}

fn checkpoint_tag(cfg: &ExperimentConfig, spec: &StrategySpec, seed: u64) -> String {
    format!("{}|{seed}|{}", spec.name, cfg.to_toml())
}

pub fn checkpoint_path(cfg: &ExperimentConfig, strategy: &str, seed: u64, round: u64) -> PathBuf {
    cfg.output_dir
        .join("checkpoints")
        .join(format!("{strategy}_seed{seed}_r{round}.ckpt"))
}

fn drive(cfg: &ExperimentConfig, spec: &StrategySpec, seed: u64, sim: &mut Simulation) -> Result<Vec<RoundLog>> {
    let mut logs = Vec::new();
    while sim.server.round < cfg.rounds {
        let (log, _) = sim.step()?;
        log::debug!(
            "{} seed {seed} round {}: mean acc {:.4}, tau {}",
            spec.name,
            log.round,
            log.mean_accuracy,
            log.tau
        );
        logs.push(log);
        let done = sim.server.round;
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            Checkpoint::capture(checkpoint_tag(cfg, spec, seed), &sim.server, &sim.clients)
                .save(&checkpoint_path(cfg, &spec.name, seed, done))?;
        }
    }
    if let Some(epochs) = spec.finetune_epochs {
        let eval = sim.finetune(epochs)?;
        if let Some(last) = logs.last_mut() {
            last.client_accuracy = eval.per_client;
            last.mean_accuracy = eval.mean;
        }
    }
    Ok(logs)
}

/// `cfg.rounds` rounds of `spec`; the log starts with the round-0 evaluation.
pub fn run_strategy(cfg: &ExperimentConfig, spec: &StrategySpec, seed: u64) -> Result<RunOutput> {
    let mut sim = new_simulation(cfg, spec, seed)?;
    let mut logs = vec![sim.initial_log()?];
    logs.extend(drive(cfg, spec, seed, &mut sim)?);
    Ok(RunOutput {
        strategy: spec.name.clone(),
        seed,
        logs,
        simulation: sim,
    })
}

/// Continues a checkpointed run up to `cfg.rounds`. The returned logs cover
/// only the rounds run after the checkpoint.
pub fn resume_strategy(
    cfg: &ExperimentConfig,
    spec: &StrategySpec,
    seed: u64,
    checkpoint: Checkpoint,
) -> Result<RunOutput> {
    if checkpoint.tag != checkpoint_tag(cfg, spec, seed) {
        return Err(Error::contract("checkpoint was written by a different configuration"));
    }
    let mut sim = new_simulation(cfg, spec, seed)?;
    sim.server = checkpoint.restore_into(&mut sim.clients)?;
    let logs = drive(cfg, spec, seed, &mut sim)?;
    Ok(RunOutput {
        strategy: spec.name.clone(),
        seed,
        logs,
        simulation: sim,
    })
}

/// All seeds of `spec`, run concurrently, returned in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, spec: &StrategySpec) -> Result<Vec<RunOutput>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| run_strategy(cfg, spec, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summaries: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
}

pub fn metrics_path(dir: &Path, strategy: &str, seed: u64) -> PathBuf {
    dir.join(format!("{strategy}_seed{seed}.jsonl"))
}

fn write_runs(dir: &Path, runs: &[RunOutput], report: &mut ExperimentReport) -> Result<()> {
    for run in runs {
        let path = metrics_path(dir, &run.strategy, run.seed);
        write_file(&path, &to_jsonl(&run.logs))?;
        report.files.push(path);
        report.summaries.push(run.summary());
    }
    Ok(())
}

fn write_summaries(dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let summary = dir.join("summary.csv");
    write_file(&summary, &summary_csv(&report.summaries))?;
    let aggregate = dir.join("aggregate.csv");
    write_file(&aggregate, &aggregate_csv(&report.summaries))?;
    report.files.push(summary);
    report.files.push(aggregate);
    Ok(())
}

/// Runs every strategy in `specs` over all seeds and writes one JSONL file
/// per run plus `summary.csv` and `aggregate.csv`.
pub fn run_comparison(cfg: &ExperimentConfig, specs: &[StrategySpec]) -> Result<(ExperimentReport, Vec<RunOutput>)> {
    cfg.validate()?;
    let mut report = ExperimentReport {
        summaries: Vec::new(),
        files: Vec::new(),
    };
    let mut all = Vec::new();
    for spec in specs {
        let runs = run_seeds(cfg, spec)?;
        write_runs(&cfg.output_dir, &runs, &mut report)?;
        all.extend(runs);
    }
    write_summaries(&cfg.output_dir, &mut report)?;
    Ok((report, all))
}

/// The configured strategy over all seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let spec = cfg.strategy.resolve()?;
    Ok(run_comparison(cfg, &[spec])?.0)
}

/// The full method and its three ablations.
pub fn ablation_specs() -> Vec<StrategySpec> {
    ["pgfedsplit", "wo_apa", "wo_gau", "wo_apa_gau"]
        .iter()
        .map(|n| StrategySpec::by_name(n).expect("built-in strategy"))
        .collect()
}

/// The configured strategy with the alpha search replaced by fixed values.
pub fn fixed_alpha_specs(cfg: &ExperimentConfig, alphas: &[f64], sync: HeadSync) -> Result<Vec<StrategySpec>> {
    let base = cfg.strategy.resolve()?;
    alphas
        .iter()
        .map(|&a| {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::param("alpha", format!("must lie in [0, 1], got {a}")));
            }
            let mut spec = base.clone().with_fixed_alpha(a, sync);
            spec.share_head = true;
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub alpha: f64,
    pub seed: u64,
    pub logs: Vec<RoundLog>,
}

pub const CURVES_HEADER: &str = "alpha,seed,round,mean_accuracy,head_aggregated";

pub fn curves_csv(curves: &[SweepCurve]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for c in curves {
        for l in &c.logs {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                c.alpha, c.seed, l.round, l.mean_accuracy, l.head_aggregated
            );
        }
    }
    out
}

/// One run per (alpha, seed) with a fixed mixing coefficient; writes the
/// usual metrics files plus `curves.csv`.
pub fn fixed_alpha_sweep(cfg: &ExperimentConfig, alphas: &[f64], sync: HeadSync) -> Result<Vec<SweepCurve>> {
    let specs = fixed_alpha_specs(cfg, alphas, sync)?;
    let (_, runs) = run_comparison(cfg, &specs)?;
    let curves: Vec<SweepCurve> = runs
        .into_iter()
        .enumerate()
        .map(|(i, r)| SweepCurve {
            alpha: alphas[i / cfg.seeds.len()],
            seed: r.seed,
            logs: r.logs,
        })
        .collect();
    write_file(&cfg.output_dir.join("curves.csv"), &curves_csv(&curves))?;
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelwiseClient {
    pub client_id: usize,
    pub train_counts: Vec<usize>,
    pub missing: Vec<usize>,
    pub with_head_sync: Vec<Option<f64>>,
    pub without_head_sync: Vec<Option<f64>>,
}

/// Each client's final model, scored per label on a balanced test set, for
/// the configured strategy and for the same strategy with head sync disabled.
pub fn labelwise_comparison(cfg: &ExperimentConfig, seed: u64, per_class: usize) -> Result<Vec<LabelwiseClient>> {
    cfg.validate()?;
    let spec = cfg.strategy.resolve()?;
    let mut never = spec.clone().with_head_sync(HeadSync::Never);
    never.fixed_alpha = None;
    never.name = format!("{}_nosync", spec.name);
    let test = uniform_test_set(cfg, seed, per_class)?;
    let with = run_strategy(cfg, &spec, seed)?;
    let without = run_strategy(cfg, &never, seed)?;
    let classes = cfg.dataset.classes;
    with.simulation
        .clients
        .iter()
        .zip(&without.simulation.clients)
        .map(|(a, b)| {
            Ok(LabelwiseClient {
                client_id: a.id(),
                train_counts: a.shard.counts.clone(),
                missing: a.shard.missing_classes(),
                with_head_sync: labelwise_accuracy(&a.model, test.samples(), classes)?,
                without_head_sync: labelwise_accuracy(&b.model, test.samples(), classes)?,
            })
        })
        .collect()
}

pub const LABELWISE_HEADER: &str = "seed,client_id,label,train_count,missing,acc_with_sync,acc_without_sync";

pub fn labelwise_csv(rows: &[(u64, Vec<LabelwiseClient>)]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from(LABELWISE_HEADER);
    out.push('\n');
    for (seed, clients) in rows {
        for c in clients {
            for l in 0..c.train_counts.len() {
                let _ = writeln!(
                    out,
                    "{seed},{},{l},{},{},{},{}",
                    c.client_id,
                    c.train_counts[l],
                    c.missing.contains(&l),
                    fmt(c.with_head_sync[l]),
                    fmt(c.without_head_sync[l]),
                );
            }
        }
    }
    out
}
