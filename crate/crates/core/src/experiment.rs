//! Multi-seed experiments, learning-curve aggregation and replay.
//!
//! Output layout for an experiment written to `out`:
//!
//! - `out/<label>/seed<S>.csv`: per-generation history of one run
//!   (`generation,best_fitness,mean_fitness,episodes,total_episodes,best_genotype`)
//! - `out/<label>/seed<S>.tree`: best genotype of that run
//! - `out/<label>.csv`: learning curve (`generation,mean_best,std_best,seed<S>...`)
//! - `out/summary.csv`: one replay summary line per run

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt::{parse, BtError, Genotype, LeafKind};
use crate::config::ConfigFile;
use crate::fitness::{cost, FitnessWeights};
use crate::gp::{run, stream_rng, GenerationStats, GpError, GpParams};
use crate::sim::{run_episode_logged, Budgets, PathRisk, PoolKind, Scenario, SimError, Termination};

pub const DESK_GENERATIONS: usize = 2000;
pub const FULL_GENERATIONS: usize = 8000;
pub const DEFAULT_REPLAY_EPISODES: usize = 1000;
/// Direct-path risks of the risk-aversion experiment.
pub const EXP3_RISK: PathRisk = PathRisk { losing_cube: 0.2, losing_localization: 0.4 };
pub const EXP3_DELTAS: [f64; 2] = [0.0, 150.0];
/// Failure profile under the risky paths of the risk-aversion experiment.
pub const EXP3_BASE_PROFILE: &str = "det";

const REPLAY_STREAM: u64 = u64::MAX - 1;

pub fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("history of seed {seed} has {found} generations, expected {expected}")]
    LengthMismatch { seed: u64, expected: usize, found: usize },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tree(#[from] BtError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Exp1,
    Exp2,
    Exp3,
    Custom,
}

/// One learning setup: a scenario and a weight set.
#[derive(Debug, Clone)]
pub struct Condition {
    pub label: String,
    pub scenario: Scenario,
    pub weights: FitnessWeights,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    /// Seed and generation count are taken from here for every run, except
    /// that each run substitutes its own seed.
    pub gp: GpParams,
    pub replay_episodes: usize,
    pub out_dir: Option<PathBuf>,
}

/// GP settings used by the experiments: default parameters with three episodes per
/// evaluation, elite re-evaluation and a final validation pass.
pub fn experiment_params(generations: usize) -> GpParams {
    GpParams {
        generations,
        episodes_per_eval: 3,
        reevaluate_elites: true,
        final_validation_episodes: 100,
        ..GpParams::default()
    }
}

impl ExperimentConfig {
    fn with_conditions(id: ExperimentId, conditions: Vec<Condition>, gp: GpParams) -> Self {
        Self { id, conditions, seeds: default_seeds(), gp, replay_episodes: DEFAULT_REPLAY_EPISODES, out_dir: None }
    }

    /// The five failure profiles on the core pool.
    pub fn exp1(cfg: &ConfigFile, gp: GpParams) -> Result<Self, ExperimentError> {
        let conditions = ["det", "stoch1", "stoch2", "stoch3", "stoch4"]
            .into_iter()
            .map(|name| {
                Ok(Condition {
                    label: name.to_string(),
                    scenario: Scenario::new(cfg.profile(name)?, PoolKind::Core9),
                    weights: cfg.weights(),
                })
            })
            .collect::<Result<_, ExperimentError>>()?;
        Ok(Self::with_conditions(ExperimentId::Exp1, conditions, gp))
    }

    /// The three pools on the stoch3 profile.
    pub fn exp2(cfg: &ConfigFile, gp: GpParams) -> Result<Self, ExperimentError> {
        let profile = cfg.profile("stoch3")?;
        let conditions = [PoolKind::Core9, PoolKind::LowNoise, PoolKind::HighNoise]
            .into_iter()
            .map(|pool| Condition {
                label: pool.as_str().to_string(),
                scenario: Scenario::new(profile.clone(), pool),
                weights: cfg.weights(),
            })
            .collect();
        Ok(Self::with_conditions(ExperimentId::Exp2, conditions, gp))
    }

    /// Risky direct paths against safe detours, first without and then with
    /// a risk penalty.
    pub fn exp3(cfg: &ConfigFile, gp: GpParams) -> Result<Self, ExperimentError> {
        let profile = cfg.profile(EXP3_BASE_PROFILE)?.with_risky_path(EXP3_RISK);
        let conditions = EXP3_DELTAS
            .into_iter()
            .map(|delta| Condition {
                label: format!("delta{delta}"),
                scenario: Scenario::new(profile.clone(), PoolKind::SafePaths),
                weights: cfg.weights().with_delta(delta),
            })
            .collect();
        Ok(Self::with_conditions(ExperimentId::Exp3, conditions, gp))
    }

    pub fn custom(condition: Condition, gp: GpParams) -> Self {
        Self::with_conditions(ExperimentId::Custom, vec![condition], gp)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::Invalid(msg.to_string()));
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        if self.conditions.is_empty() {
            return bad("no conditions");
        }
        let mut labels: Vec<&str> = self.conditions.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.conditions.len() {
            return bad("condition labels must be unique");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be unique");
        }
        if self.id == ExperimentId::Exp3 {
            let safe = self.conditions.iter().all(|c| c.scenario.pool.kind() == PoolKind::SafePaths);
            let deltas: Vec<f64> = self.conditions.iter().map(|c| c.weights.delta).collect();
            if !safe || deltas.len() != 2 || deltas[0] == deltas[1] {
                return bad("exp3 needs the safe_paths pool and two different deltas");
            }
        }
        for c in &self.conditions {
            c.scenario.profile.validate()?;
            c.weights.validate().map_err(ExperimentError::Invalid)?;
        }
        self.gp.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub generation: usize,
    pub mean_best: f64,
    pub std_best: f64,
    pub per_seed: Vec<f64>,
}

/// Per-generation mean and sample standard deviation of the best fitness
/// across seeds.
pub fn aggregate(histories: &[(u64, Vec<GenerationStats>)]) -> Result<Vec<CurvePoint>, ExperimentError> {
    let Some((_, first)) = histories.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some((seed, h)) = histories.iter().find(|(_, h)| h.len() != len) {
        return Err(ExperimentError::LengthMismatch { seed: *seed, expected: len, found: h.len() });
    }
    let n = histories.len() as f64;
    Ok((0..len)
        .map(|g| {
            let per_seed: Vec<f64> = histories.iter().map(|(_, h)| h[g].best_fitness).collect();
            let mean = per_seed.iter().sum::<f64>() / n;
            let std = if histories.len() < 2 {
                0.0
            } else {
                (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            CurvePoint { generation: first[g].generation, mean_best: mean, std_best: std, per_seed }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_fitness: f64,
    pub mean_time: f64,
    pub mean_risk: f64,
    pub terminations: BTreeMap<String, usize>,
    /// How often each action was executed over all episodes.
    pub executed: BTreeMap<String, usize>,
}

impl ReplayReport {
    pub fn executed_any(&self, names: &[&str]) -> bool {
        names.iter().any(|n| self.executed.get(*n).is_some_and(|&c| c > 0))
    }
}

/// Monte Carlo evaluation of a fixed tree.
pub fn replay(
    genotype: &Genotype,
    scenario: &Scenario,
    weights: &FitnessWeights,
    episodes: usize,
    seed: u64,
) -> Result<ReplayReport, ExperimentError> {
    let tree = parse(genotype, scenario.vocab())?;
    let mut rng = stream_rng(seed, REPLAY_STREAM);
    let mut terminations: BTreeMap<String, usize> =
        Termination::ALL.iter().map(|t| (t.as_str().to_string(), 0)).collect();
    let mut executed: BTreeMap<String, usize> = BTreeMap::new();
    let (mut successes, mut fitness, mut time, mut risk) = (0, 0.0, 0.0, 0.0);
    for _ in 0..episodes {
        let (result, log) = run_episode_logged(&tree, scenario, Budgets::default(), &mut rng)?;
        successes += usize::from(result.placed);
        fitness += cost(&result, weights).fitness;
        time += result.final_state.elapsed_time;
        risk += result.final_state.risk_sum;
        *terminations.entry(result.terminated_by.as_str().to_string()).or_default() += 1;
        for step in log {
            if scenario.vocab().kind(step.behavior) == LeafKind::Action {
                *executed.entry(scenario.vocab().name(step.behavior).to_string()).or_default() += 1;
            }
        }
    }
    let n = episodes.max(1) as f64;
    Ok(ReplayReport {
        episodes,
        successes,
        success_rate: successes as f64 / n,
        mean_fitness: fitness / n,
        mean_time: time / n,
        mean_risk: risk / n,
        terminations,
        executed,
    })
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub history: Vec<GenerationStats>,
    pub best: Genotype,
    pub best_text: String,
    pub best_fitness: f64,
    pub total_episodes: u64,
    pub replay: ReplayReport,
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub label: String,
    pub runs: Vec<RunRecord>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub id: ExperimentId,
    pub conditions: Vec<ConditionResult>,
}

impl ExperimentResult {
    pub fn condition(&self, label: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.label == label)
    }
}

/// One seeded run followed by a replay of its best tree.
pub fn run_single(condition: &Condition, gp: &GpParams, seed: u64, replay_episodes: usize) -> Result<RunRecord, ExperimentError> {
    let params = GpParams { seed, ..gp.clone() };
    let outcome = run(&params, &condition.scenario, &condition.weights)?;
    let replay = replay(&outcome.best.genotype, &condition.scenario, &condition.weights, replay_episodes, seed)?;
    Ok(RunRecord {
        label: condition.label.clone(),
        seed,
        best_text: outcome.best.genotype.to_text(condition.scenario.vocab()),
        best_fitness: outcome.best.score(),
        best: outcome.best.genotype,
        history: outcome.history,
        total_episodes: outcome.total_episodes,
        replay,
    })
}

/// Runs every condition for every seed, then writes the output files if an
/// output directory is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let jobs: Vec<(usize, u64)> =
        (0..config.conditions.len()).flat_map(|c| config.seeds.iter().map(move |&s| (c, s))).collect();
    let job = |&(c, seed): &(usize, u64)| run_single(&config.conditions[c], &config.gp, seed, config.replay_episodes);
    #[cfg(feature = "parallel")]
    let records: Vec<RunRecord> = {
        use rayon::prelude::*;
        jobs.par_iter().map(job).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<RunRecord> = jobs.iter().map(job).collect::<Result<_, _>>()?;

    let mut conditions = Vec::with_capacity(config.conditions.len());
    let mut records = records.into_iter();
    for condition in &config.conditions {
        let runs: Vec<RunRecord> = records.by_ref().take(config.seeds.len()).collect();
        let histories: Vec<(u64, Vec<GenerationStats>)> = runs.iter().map(|r| (r.seed, r.history.clone())).collect();
        let curve = aggregate(&histories)?;
        conditions.push(ConditionResult { label: condition.label.clone(), runs, curve });
    }
    let result = ExperimentResult { id: config.id, conditions };
    if let Some(out) = &config.out_dir {
        write_outputs(&result, out)?;
    }
    Ok(result)
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn write_history_csv(path: &Path, history: &[GenerationStats]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["generation", "best_fitness", "mean_fitness", "episodes", "total_episodes", "best_genotype"])?;
    for s in history {
        w.write_record([
            s.generation.to_string(),
            num(s.best_fitness),
            num(s.mean_fitness),
            s.episodes.to_string(),
            s.total_episodes.to_string(),
            s.best_genotype.clone(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, seeds: &[u64], curve: &[CurvePoint]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["generation".to_string(), "mean_best".to_string(), "std_best".to_string()];
    header.extend(seeds.iter().map(|s| format!("seed{s}")));
    w.write_record(&header)?;
    for p in curve {
        let mut row = vec![p.generation.to_string(), num(p.mean_best), num(p.std_best)];
        row.extend(p.per_seed.iter().map(|&x| num(x)));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_outputs(result: &ExperimentResult, out: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let summary_path = out.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record([
        "condition",
        "seed",
        "best_fitness",
        "node_count",
        "success_rate",
        "mean_time",
        "mean_risk",
        "total_episodes",
        "best_genotype",
    ])?;
    for condition in &result.conditions {
        let dir = out.join(&condition.label);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for r in &condition.runs {
            write_history_csv(&dir.join(format!("seed{}.csv", r.seed)), &r.history)?;
            let tree_path = dir.join(format!("seed{}.tree", r.seed));
            fs::write(&tree_path, format!("{}\n", r.best_text)).map_err(io_err(&tree_path))?;
            summary.write_record([
                condition.label.clone(),
                r.seed.to_string(),
                num(r.best_fitness),
                r.best.node_count().to_string(),
                num(r.replay.success_rate),
                num(r.replay.mean_time),
                num(r.replay.mean_risk),
                r.total_episodes.to_string(),
                r.best_text.clone(),
            ])?;
        }
        let seeds: Vec<u64> = condition.runs.iter().map(|r| r.seed).collect();
        write_curve_csv(&out.join(format!("{}.csv", condition.label)), &seeds, &condition.curve)?;
    }
    summary.flush().map_err(io_err(&summary_path))?;
    Ok(())
}

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("cannot parse seeds {text:?}; use 0..9 or 1,4,7");
    if let Some((a, b)) = text.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}
