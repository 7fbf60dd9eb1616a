use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use btgp::bt::Genotype;
use btgp::config::{ConfigError, ConfigFile};
use btgp::experiment::{
    experiment_params, parse_seeds, replay, run_experiment, write_history_csv, ExperimentConfig,
    ExperimentError, ExperimentResult, DESK_GENERATIONS, FULL_GENERATIONS,
};
use btgp::gp::{Checkpoint, EpisodeEvaluator, Evolution, GpError, GpParams};
use btgp::sim::{PoolKind, Scenario};

/// Evolve behavior trees for a simulated pick-and-place task.
#[derive(Parser)]
#[command(name = "btgp", version)]
struct Cli {
    /// TOML file with [gp], [weights] and [profiles.*] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One GP run.
    Run(RunArgs),
    /// Failure profiles det and stoch1-4.
    Exp1(ExpArgs),
    /// Core, low-noise and high-noise pools on stoch3.
    Exp2(ExpArgs),
    /// Risky against safe paths, delta 0 and 150.
    Exp3(ExpArgs),
    /// Monte Carlo evaluation of a saved tree.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "BTGP_OUT", default_value = "btgp-out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "det")]
    profile: String,
    #[arg(long, default_value = "core9")]
    pool: PoolKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Use the full generation budget instead of the desk-scale one.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    episodes_per_eval: Option<usize>,
    /// Re-run elites every generation and average their fitness.
    #[arg(long)]
    reevaluate_elites: bool,
    /// Write out/checkpoint.json every K generations.
    #[arg(long, value_name = "K")]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ExpArgs {
    /// Inclusive range like 0..9, or a list like 1,4,7.
    #[arg(long, default_value = "0..9", value_parser = seed_list)]
    seeds: SeedList,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    full: bool,
    /// Episodes used to replay each best tree.
    #[arg(long, default_value_t = 1000)]
    replay_episodes: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

#[derive(Args)]
struct ReplayArgs {
    /// File holding a genotype in text form.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long, default_value = "det")]
    profile: String,
    #[arg(long, default_value = "core9")]
    pool: PoolKind,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Config(ConfigError::Io { .. }) | CliError::Experiment(ExperimentError::Io { .. }) => 3,
            CliError::Experiment(ExperimentError::Csv(e)) if e.is_io_error() => 3,
            _ => 2,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Run(args) => run_cmd(&cfg, args),
        Command::Exp1(args) => exp_cmd(&cfg, args, ExperimentConfig::exp1),
        Command::Exp2(args) => exp_cmd(&cfg, args, ExperimentConfig::exp2),
        Command::Exp3(args) => exp_cmd(&cfg, args, ExperimentConfig::exp3),
        Command::Replay(args) => replay_cmd(&cfg, args),
    }
}

fn base_params(cfg: &ConfigFile, generations: Option<usize>, full: bool) -> GpParams {
    let default_generations = if full { FULL_GENERATIONS } else { DESK_GENERATIONS };
    let mut params = cfg.gp.clone().unwrap_or_else(|| experiment_params(default_generations));
    if full && cfg.gp.is_some() {
        params.generations = FULL_GENERATIONS;
    }
    if let Some(g) = generations {
        params.generations = g;
    }
    params
}

fn run_cmd(cfg: &ConfigFile, args: RunArgs) -> Result<(), CliError> {
    let mut params = base_params(cfg, args.generations, args.full);
    params.seed = args.seed;
    if let Some(n) = args.population {
        params.population = n;
    }
    if let Some(k) = args.episodes_per_eval {
        params.episodes_per_eval = k;
    }
    params.reevaluate_elites |= args.reevaluate_elites;
    params.validate()?;
    let mut weights = cfg.weights();
    if let Some(d) = args.delta {
        weights = weights.with_delta(d);
    }
    weights.validate().map_err(CliError::Invalid)?;
    let scenario = Scenario::new(cfg.profile(&args.profile)?, args.pool);
    let evaluator = EpisodeEvaluator::new(&scenario, weights);

    let out = &args.out.out;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut evolution = match &args.resume {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io(path))?;
            let checkpoint: Checkpoint = serde_json::from_str(&text)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            Evolution::resume(checkpoint, params, scenario.vocab(), &evaluator)?
        }
        None => Evolution::new(params, scenario.vocab(), &evaluator)?,
    };
    let checkpoint_path = out.join("checkpoint.json");
    while !evolution.is_done() {
        evolution.step()?;
        if let Some(k) = args.checkpoint_every.filter(|&k| k > 0) {
            if evolution.generation() % k == 0 || evolution.is_done() {
                let json = serde_json::to_string(&evolution.checkpoint()).expect("checkpoint serializes");
                std::fs::write(&checkpoint_path, json).map_err(io(&checkpoint_path))?;
            }
        }
    }
    let seed = evolution.params().seed;
    let outcome = evolution.finish()?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    let best_text = outcome.best.genotype.to_text(scenario.vocab());
    let tree_path = out.join("best.tree");
    std::fs::write(&tree_path, format!("{best_text}\n")).map_err(io(&tree_path))?;
    let report = replay(&outcome.best.genotype, &scenario, &weights, 1000, seed)?;
    println!("best J      {:.4}", outcome.best.score());
    println!("best tree   {best_text}");
    println!("nodes       {}", outcome.best.genotype.node_count());
    println!("episodes    {}", outcome.total_episodes);
    println!("replay      success {:.3}, mean T {:.2} s, mean P {:.3}", report.success_rate, report.mean_time, report.mean_risk);
    Ok(())
}

fn exp_cmd(
    cfg: &ConfigFile,
    args: ExpArgs,
    build: fn(&ConfigFile, GpParams) -> Result<ExperimentConfig, ExperimentError>,
) -> Result<(), CliError> {
    let mut config = build(cfg, base_params(cfg, args.generations, args.full))?;
    config.seeds = args.seeds.0;
    config.replay_episodes = args.replay_episodes;
    config.out_dir = Some(args.out.out.clone());
    let result = run_experiment(&config)?;
    print_summary(&result);
    println!("written to {}", args.out.out.display());
    Ok(())
}

fn print_summary(result: &ExperimentResult) {
    for c in &result.conditions {
        let n = c.runs.len() as f64;
        let last = c.curve.last().map_or(f64::NAN, |p| p.mean_best);
        let success = c.runs.iter().map(|r| r.replay.success_rate).sum::<f64>() / n;
        let nodes = c.runs.iter().map(|r| r.best.node_count() as f64).sum::<f64>() / n;
        println!("{:<12} final mean best J {last:9.3}  replay success {success:.3}  mean nodes {nodes:.1}", c.label);
    }
}

fn replay_cmd(cfg: &ConfigFile, args: ReplayArgs) -> Result<(), CliError> {
    let scenario = Scenario::new(cfg.profile(&args.profile)?, args.pool);
    let mut weights = cfg.weights();
    if let Some(d) = args.delta {
        weights = weights.with_delta(d);
    }
    let text = std::fs::read_to_string(&args.tree).map_err(io(&args.tree))?;
    let genotype = Genotype::parse_text(text.trim(), scenario.vocab()).map_err(|e| CliError::Invalid(e.to_string()))?;
    if !btgp::bt::is_valid(&genotype, scenario.vocab()).unwrap_or(false) {
        return Err(CliError::Invalid("tree violates the structural constraints".into()));
    }
    let report = replay(&genotype, &scenario, &weights, args.episodes, args.seed)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    println!("episodes      {}", report.episodes);
    println!("success rate  {:.4}", report.success_rate);
    println!("mean J        {:.4}", report.mean_fitness);
    println!("mean T        {:.3} s", report.mean_time);
    println!("mean P        {:.4}", report.mean_risk);
    for (t, n) in &report.terminations {
        println!("  {t:<16}{n}");
    }
    println!("executed actions:");
    for (name, n) in &report.executed {
        println!("  {name:<20}{n}");
    }
    Ok(())
}
