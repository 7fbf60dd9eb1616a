use btgp::bt::{parse, Genotype};
use btgp::config::ConfigFile;
use btgp::experiment::{experiment_params, replay, run_experiment, ExperimentConfig};
use btgp::fitness::{evaluate, FitnessWeights};
use btgp::gp::{run, stream_rng, GpParams};
use btgp::sim::{run_episode, Budgets, PoolKind, Scenario, REFERENCE_SOLUTION};

fn reference(scenario: &Scenario) -> Genotype {
    Genotype::parse_text(REFERENCE_SOLUTION, scenario.vocab()).unwrap()
}

#[test]
fn deterministic_evaluation_ignores_episode_count() {
    let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
    let tree = parse(&reference(&scenario), scenario.vocab()).unwrap();
    let w = FitnessWeights::TABLE2;
    let one = evaluate(&tree, &scenario, &w, Budgets::default(), 1, &mut stream_rng(0, 0)).unwrap();
    for k in [2, 7, 50] {
        let many = evaluate(&tree, &scenario, &w, Budgets::default(), k, &mut stream_rng(k as u64, 3)).unwrap();
        assert!((many.fitness - one.fitness).abs() < 1e-9, "k = {k}");
    }
}

#[test]
fn stochastic_evaluation_is_seeded() {
    let scenario = Scenario::builtin("stoch3", PoolKind::Core9).unwrap();
    let tree = parse(&reference(&scenario), scenario.vocab()).unwrap();
    let w = FitnessWeights::TABLE2;
    let a = evaluate(&tree, &scenario, &w, Budgets::default(), 3, &mut stream_rng(11, 0)).unwrap();
    let b = evaluate(&tree, &scenario, &w, Budgets::default(), 3, &mut stream_rng(11, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn failures_lower_the_expected_fitness() {
    let w = FitnessWeights::TABLE2;
    let det = Scenario::builtin("det", PoolKind::Core9).unwrap();
    let stoch = Scenario::builtin("stoch3", PoolKind::Core9).unwrap();
    let tree = parse(&reference(&det), det.vocab()).unwrap();
    let j_det = evaluate(&tree, &det, &w, Budgets::default(), 1, &mut stream_rng(0, 0)).unwrap().fitness;
    let j_stoch = evaluate(&tree, &stoch, &w, Budgets::default(), 1000, &mut stream_rng(0, 0)).unwrap().fitness;
    assert!(j_stoch < j_det, "{j_stoch} vs {j_det}");
}

#[test]
fn stoch3_pick_failure_rate() {
    use btgp::bt::World;
    use btgp::sim::{Episode, Head, Pose, WorldState};
    let scenario = Scenario::builtin("stoch3", PoolKind::Core9).unwrap();
    let g = scenario.profile.geometry;
    let mut ready = WorldState::reset(&scenario.profile);
    ready.robot_true = g.approach(g.pick);
    ready.robot_est = Pose::new(ready.robot_true.x, 0.05);
    ready.localized = true;
    ready.head = Head::Down;
    let pick = scenario.vocab().lookup("pick").unwrap();
    let mut rng = stream_rng(7, 0);
    let failures = (0..10_000)
        .filter(|_| {
            let mut ep = Episode::with_state(&scenario, ready.clone(), &mut rng);
            !ep.execute(pick).unwrap().eq(&btgp::bt::TickStatus::Success)
        })
        .count();
    let rate = failures as f64 / 10_000.0;
    assert!((rate - 0.2).abs() <= 0.01, "{rate}");
}

#[test]
fn reference_tree_on_stoch4_sometimes_fails() {
    let scenario = Scenario::builtin("stoch4", PoolKind::Core9).unwrap();
    let g = reference(&scenario);
    let w = FitnessWeights::TABLE2;
    let a = replay(&g, &scenario, &w, 10_000, 4).unwrap();
    let b = replay(&g, &scenario, &w, 10_000, 4).unwrap();
    assert!(a.success_rate > 0.0 && a.success_rate < 1.0, "{}", a.success_rate);
    assert_eq!(a, b);
    assert_eq!(a.terminations.values().sum::<usize>(), 10_000);
}

#[test]
fn default_run_solves_the_deterministic_task() {
    let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
    let outcome = run(&GpParams::default(), &scenario, &FitnessWeights::TABLE2).unwrap();
    let tree = parse(&outcome.best.genotype, scenario.vocab()).unwrap();
    let result = run_episode(&tree, &scenario, Budgets::default(), &mut stream_rng(0, 0)).unwrap();
    assert!(result.placed, "{}", outcome.best.genotype.to_text(scenario.vocab()));
    assert_eq!(outcome.history.len(), 8001);
}

#[test]
fn exp1_writes_one_csv_per_run_and_curve_per_profile() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::exp1(&ConfigFile::default(), experiment_params(5)).unwrap();
    config.replay_episodes = 10;
    config.out_dir = Some(dir.path().to_path_buf());
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.conditions.len(), 5);
    let mut run_csvs = 0;
    for label in ["det", "stoch1", "stoch2", "stoch3", "stoch4"] {
        assert!(dir.path().join(format!("{label}.csv")).is_file());
        for seed in 0..10 {
            run_csvs += usize::from(dir.path().join(label).join(format!("seed{seed}.csv")).is_file());
            assert!(dir.path().join(label).join(format!("seed{seed}.tree")).is_file());
        }
    }
    assert_eq!(run_csvs, 50);
}

#[test]
fn noise_conditions_share_the_curve_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::exp2(&ConfigFile::default(), experiment_params(3)).unwrap();
    config.seeds = vec![0, 1];
    config.replay_episodes = 5;
    config.out_dir = Some(dir.path().to_path_buf());
    run_experiment(&config).unwrap();
    let header = |label: &str| {
        let text = std::fs::read_to_string(dir.path().join(format!("{label}.csv"))).unwrap();
        (text.lines().next().unwrap().to_string(), text.lines().count())
    };
    assert_eq!(header("core9"), header("high_noise"));
    assert_eq!(header("core9").0, "generation,mean_best,std_best,seed0,seed1");
}

#[test]
fn high_delta_prefers_safe_paths() {
    let config = ExperimentConfig::exp3(&ConfigFile::default(), experiment_params(600)).unwrap();
    let condition = config.conditions.iter().find(|c| c.label == "delta150").unwrap();
    let params = GpParams { seed: 0, ..config.gp.clone() };
    let outcome = run(&params, &condition.scenario, &condition.weights).unwrap();
    let text = outcome.best.genotype.to_text(condition.scenario.vocab());
    assert!(text.contains("move_to_pick_safe") && text.contains("move_to_goal_safe"), "{text}");
}

#[test]
fn stoch3_curve_improves() {
    let mut config = ExperimentConfig::exp1(&ConfigFile::default(), experiment_params(150)).unwrap();
    config.conditions.retain(|c| c.label == "stoch3");
    config.replay_episodes = 10;
    let result = run_experiment(&config).unwrap();
    let curve = &result.conditions[0].curve;
    assert_eq!(curve.len(), 151);
    assert!(curve.last().unwrap().mean_best > curve[0].mean_best);
    assert!(curve.iter().all(|p| p.std_best >= 0.0 && p.per_seed.len() == 10));
}
