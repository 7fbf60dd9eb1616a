use btgp::bt::{
    is_valid, parse, random_genotype, serialize, BehaviorTree, BtError, ControlKind, Genotype, LeafId, LeafKind, Node,
    TickStatus, Token, Vocabulary, World,
};
use btgp::fitness::FitnessWeights;
use btgp::gp::{crossover, mutate, stream_rng, tournament_indices, GpParams};
use btgp::sim::{run_episode, run_episode_logged, Budgets, Episode, PoolKind, Pose, Scenario, WorldState};
use proptest::prelude::*;

fn small_vocab() -> Vocabulary {
    let mut v = Vocabulary::new();
    for name in ["a", "b", "c", "d", "e"] {
        v.push(name, LeafKind::Action).unwrap();
    }
    for name in ["k", "m"] {
        v.push(name, LeafKind::Condition).unwrap();
    }
    v
}

fn genotype(vocab: &Vocabulary, length: usize, seed: u64) -> Genotype {
    random_genotype(vocab, length, 0.5, &mut stream_rng(seed, 0)).unwrap()
}

/// Fixed outcome per leaf; records the order of execution.
struct Stub {
    outcomes: Vec<TickStatus>,
    trace: Vec<LeafId>,
}

impl World for Stub {
    fn execute(&mut self, leaf: LeafId) -> Result<TickStatus, BtError> {
        self.trace.push(leaf);
        Ok(self.outcomes[leaf.index()])
    }
}

/// Independent recursive evaluation of a token stream.
fn oracle(tokens: &[Token], at: usize, outcomes: &[TickStatus], trace: &mut Vec<LeafId>) -> (TickStatus, usize) {
    match tokens[at] {
        Token::Leaf(id) => {
            trace.push(id);
            (outcomes[id.index()], at + 1)
        }
        Token::Open(kind) => {
            let stop_on = if kind == ControlKind::Sequence { TickStatus::Success } else { TickStatus::Failure };
            let mut i = at + 1;
            let mut result = stop_on;
            let mut decided = false;
            while !matches!(tokens[i], Token::Close) {
                if decided {
                    i = btgp::bt::subtree_span(tokens, i).unwrap().end;
                    continue;
                }
                let (status, next) = oracle(tokens, i, outcomes, trace);
                i = next;
                if status != stop_on {
                    result = status;
                    decided = true;
                }
            }
            (result, i + 1)
        }
        Token::Close => unreachable!(),
    }
}

fn status_strategy() -> impl Strategy<Value = TickStatus> {
    prop_oneof![Just(TickStatus::Success), Just(TickStatus::Failure), Just(TickStatus::Running)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn serialize_parse_round_trip(seed: u64, length in 1usize..40) {
        let v = small_vocab();
        let g = genotype(&v, length, seed);
        prop_assert!(is_valid(&g, &v).unwrap());
        let tree = parse(&g, &v).unwrap();
        prop_assert_eq!(serialize(&tree), g.clone());
        let text = g.to_text(&v);
        prop_assert_eq!(Genotype::parse_text(&text, &v).unwrap(), g);
    }

    #[test]
    fn node_count_is_tokens_minus_closes(seed: u64, length in 1usize..40) {
        let v = small_vocab();
        let g = genotype(&v, length, seed);
        let closes = g.tokens().iter().filter(|t| matches!(t, Token::Close)).count();
        prop_assert_eq!(g.node_count(), g.len() - closes);
        prop_assert_eq!(parse(&g, &v).unwrap().node_count(), g.node_count());
        prop_assert!(g.node_count() <= length);
    }

    #[test]
    fn tick_matches_recursive_oracle(seed: u64, length in 1usize..30, outcomes in prop::collection::vec(status_strategy(), 7)) {
        let v = small_vocab();
        let g = genotype(&v, length, seed);
        let tree = parse(&g, &v).unwrap();
        let mut stub = Stub { outcomes: outcomes.clone(), trace: Vec::new() };
        let status = tree.tick(&mut stub).unwrap();
        let mut trace = Vec::new();
        let (expected, end) = oracle(g.tokens(), 0, &outcomes, &mut trace);
        prop_assert_eq!(end, g.len());
        prop_assert_eq!(status, expected);
        prop_assert_eq!(&stub.trace, &trace);
        // Ticking again from the same world state repeats itself.
        let mut again = Stub { outcomes, trace: Vec::new() };
        prop_assert_eq!(tree.tick(&mut again).unwrap(), status);
        prop_assert_eq!(again.trace, stub.trace);
    }

    #[test]
    fn operators_preserve_validity(seed: u64, la in 1usize..20, lb in 1usize..20) {
        let v = small_vocab();
        let (a, b) = (genotype(&v, la, seed), genotype(&v, lb, seed ^ 0xABCD));
        let params = GpParams { node_cap: 24, ..GpParams::default() };
        let mut rng = stream_rng(seed, 1);
        let (x, y) = crossover(&a, &b, &v, params.node_cap, &mut rng);
        for g in [&x, &y] {
            prop_assert!(is_valid(g, &v).unwrap());
            prop_assert!(g.node_count() <= params.node_cap.max(la).max(lb));
        }
        let m = mutate(&a, &v, &params, &mut rng);
        prop_assert!(is_valid(&m, &v).unwrap());
        prop_assert!(m.node_count() <= params.node_cap);
    }

    #[test]
    fn tournament_keeps_best_and_drops_worst(scores in prop::collection::vec(-100i32..100, 2..60), frac in 0.05f64..0.95, seed: u64) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let slots = ((scores.len() as f64 * frac) as usize).clamp(1, scores.len() - 1);
        let out = tournament_indices(&scores, slots, &mut stream_rng(seed, 2)).unwrap();
        prop_assert_eq!(out.len(), slots);
        let max = scores.iter().copied().fold(f64::MIN, f64::max);
        let min = scores.iter().copied().fold(f64::MAX, f64::min);
        prop_assert!(out.iter().any(|&i| scores[i] == max));
        if max > min {
            let worst_count = scores.iter().filter(|&&s| s == min).count();
            if worst_count == 1 {
                prop_assert!(out.iter().all(|&i| scores[i] != min));
            }
        }
        let mut sorted = out.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), slots);
    }
}

fn random_state(bits: u8, x: f64, y: f64, scenario: &Scenario) -> WorldState {
    let mut s = WorldState::reset(&scenario.profile);
    let g = scenario.profile.geometry;
    let robot = match bits & 3 {
        0 => Pose::new(x, y),
        1 => g.approach(g.pick),
        2 => g.approach(g.goal),
        _ => g.start,
    };
    s.robot_true = robot;
    s.localized = bits & 4 != 0;
    s.robot_est = Pose::new(robot.x, robot.y + if s.localized { 0.05 } else { 1.0 });
    s.arm_tucked = bits & 8 != 0;
    s.head = if bits & 16 != 0 { btgp::sim::Head::Down } else { btgp::sim::Head::Up };
    s.holding_cube = bits & 32 != 0;
    s.cube = if s.holding_cube { robot } else { g.pick };
    s
}

fn precondition_holds(name: &str, s: &WorldState, scenario: &Scenario) -> bool {
    let g = scenario.profile.geometry;
    let reach = |p: Pose| s.robot_true.distance(p) <= g.reach_radius;
    match name {
        "pick" => !s.holding_cube && s.localized && s.head == btgp::sim::Head::Down && reach(s.cube),
        "place" => s.holding_cube && s.localized && s.head == btgp::sim::Head::Down && reach(g.goal),
        n if n.starts_with("move_to") => s.localized && s.arm_tucked && s.head == btgp::sim::Head::Up,
        _ => true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn guards_only_touch_time_and_risk(bits: u8, x in -3.0f64..3.0, y in -2.0f64..2.0, which in 0usize..11, seed: u64,
                                       profile in prop::sample::select(vec!["det", "stoch1", "stoch2", "stoch3", "stoch4"])) {
        let scenario = Scenario::builtin(profile, PoolKind::SafePaths).unwrap();
        let id = LeafId(which as u16);
        let name = scenario.vocab().name(id).to_string();
        let before = random_state(bits, x, y, &scenario);
        prop_assume!(!precondition_holds(&name, &before, &scenario));
        let mut rng = stream_rng(seed, 3);
        let mut episode = Episode::with_state(&scenario, before.clone(), &mut rng);
        let status = episode.execute(id).unwrap();
        prop_assert_eq!(status, TickStatus::Failure);
        let mut after = episode.state.clone();
        prop_assert!(after.elapsed_time >= before.elapsed_time);
        prop_assert!(after.risk_sum >= before.risk_sum);
        after.elapsed_time = before.elapsed_time;
        after.risk_sum = before.risk_sum;
        prop_assert_eq!(after, before);
    }

    #[test]
    fn episode_invariants(seed: u64, length in 1usize..30,
                          profile in prop::sample::select(vec!["det", "stoch1", "stoch2", "stoch3", "stoch4"])) {
        let scenario = Scenario::builtin(profile, PoolKind::Core9).unwrap();
        let g = random_genotype(scenario.vocab(), length, 0.5, &mut stream_rng(seed, 4)).unwrap();
        let tree = parse(&g, scenario.vocab()).unwrap();
        let mut rng = stream_rng(seed, 5);
        let (result, log) = run_episode_logged(&tree, &scenario, Budgets::default(), &mut rng).unwrap();
        let geometry = scenario.profile.geometry;
        let mut held = false;
        for step in &log {
            prop_assert!(step.time >= 0.0 && step.risk >= 0.0);
            // The cube is on the pick table, at the goal, or in the gripper.
            let in_hand = step.cube == step.robot;
            prop_assert!(step.cube == geometry.pick || step.cube == geometry.goal || in_hand);
            held |= in_hand && step.cube != geometry.pick && step.cube != geometry.goal;
        }
        let risk: f64 = log.iter().map(|s| s.risk).sum();
        prop_assert!((risk - result.final_state.risk_sum).abs() < 1e-9);
        let time: f64 = log.iter().map(|s| s.time).sum();
        prop_assert!((time - result.final_state.elapsed_time).abs() < 1e-9);
        let s = &result.final_state;
        prop_assert!((s.loc_error() - s.robot_true.distance(s.robot_est)).abs() < 1e-15);
        prop_assert!(!held || result.picked);
    }

    #[test]
    fn deterministic_profile_is_pure(seed: u64, length in 1usize..30, a: u64, b: u64) {
        let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
        let g = random_genotype(scenario.vocab(), length, 0.5, &mut stream_rng(seed, 6)).unwrap();
        let tree = parse(&g, scenario.vocab()).unwrap();
        let x = run_episode(&tree, &scenario, Budgets::default(), &mut stream_rng(a, 0)).unwrap();
        let y = run_episode(&tree, &scenario, Budgets::default(), &mut stream_rng(b, 9)).unwrap();
        prop_assert_eq!(x, y);
    }
}

#[test]
fn weights_default_is_table_two() {
    assert_eq!(FitnessWeights::default(), FitnessWeights::TABLE2);
    let leaf = BehaviorTree::new(Node::Leaf { id: LeafId(0), kind: LeafKind::Action });
    assert_eq!(leaf.node_count(), 1);
}
