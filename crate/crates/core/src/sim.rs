//! State-machine stand-in for the physics simulator.
//!
//! The world tracks the robot (true and estimated pose, arm, head), the cube
//! and the accumulated time and risk. Each behavior resolves atomically in a
//! single call with probabilistic outcomes taken from a [`Profile`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt::{BehaviorTree, BtError, LeafId, LeafKind, TickStatus, Vocabulary, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown profile `{0}` (expected det, stoch1, stoch2, stoch3 or stoch4)")]
    UnknownProfile(String),
    #[error("unknown scenario `{0}` (expected core9, low_noise, high_noise or safe_paths)")]
    UnknownScenario(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Tree(#[from] BtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn lerp(self, other: Pose, t: f64) -> Pose {
        Pose::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }

    fn offset(self, dx: f64, dy: f64) -> Pose {
        Pose::new(self.x + dx, self.y + dy)
    }
}

/// The five failure probabilities of one experimental condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureProbabilities {
    pub localization_failure: f64,
    pub pick_failure: f64,
    pub place_failure: f64,
    pub losing_cube: f64,
    pub losing_localization: f64,
}

impl FailureProbabilities {
    pub const ZERO: Self = Self {
        localization_failure: 0.0,
        pick_failure: 0.0,
        place_failure: 0.0,
        losing_cube: 0.0,
        losing_localization: 0.0,
    };

    fn as_array(&self) -> [(&'static str, f64); 5] {
        [
            ("localization_failure", self.localization_failure),
            ("pick_failure", self.pick_failure),
            ("place_failure", self.place_failure),
            ("losing_cube", self.losing_cube),
            ("losing_localization", self.losing_localization),
        ]
    }
}

/// Navigation risks of a path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRisk {
    pub losing_cube: f64,
    pub losing_localization: f64,
}

impl PathRisk {
    pub const NONE: Self = Self { losing_cube: 0.0, losing_localization: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub start: Pose,
    /// Where the cube rests on the pick table (and respawns when dropped).
    pub pick: Pose,
    /// Where the cube must be placed.
    pub goal: Pose,
    pub reach_radius: f64,
    /// Distance the robot keeps from a table when it drives up to it.
    pub standoff: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            start: Pose::new(0.0, 0.0),
            pick: Pose::new(2.0, 0.0),
            goal: Pose::new(-2.0, 0.0),
            reach_radius: 0.6,
            standoff: 0.5,
        }
    }
}

impl Geometry {
    /// Pose in front of `table`, `standoff` metres back towards the start.
    pub fn approach(&self, table: Pose) -> Pose {
        let d = table.distance(self.start);
        if d <= self.standoff || d == 0.0 {
            return self.start;
        }
        self.start.lerp(table, (d - self.standoff) / d)
    }
}

/// Durations in seconds; travel is charged by path length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub localise: f64,
    pub head: f64,
    pub tuck: f64,
    pub pick: f64,
    pub place: f64,
    /// Metres per second on the direct path.
    pub travel_speed: f64,
    /// Time multiplier of the detour paths.
    pub safe_path_factor: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self { localise: 5.0, head: 1.0, tuck: 2.0, pick: 5.0, place: 5.0, travel_speed: 0.5, safe_path_factor: 2.0 }
    }
}

/// Localization error magnitudes in metres.
pub const LOST_LOC_ERROR: f64 = 1.0;
pub const LOCALIZED_LOC_ERROR: f64 = 0.05;

/// One experimental condition: failure probabilities, geometry and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub probabilities: FailureProbabilities,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub timing: Timing,
    /// Replaces the navigation risks of the direct `move_to_*` paths.
    #[serde(default)]
    pub risky_path: Option<PathRisk>,
}

pub const BUILTIN_PROFILES: [&str; 5] = ["det", "stoch1", "stoch2", "stoch3", "stoch4"];

impl Profile {
    pub fn builtin(name: &str) -> Result<Self, SimError> {
        let p = |l, pi, pl, c, ll| FailureProbabilities {
            localization_failure: l,
            pick_failure: pi,
            place_failure: pl,
            losing_cube: c,
            losing_localization: ll,
        };
        let probabilities = match name {
            "det" => FailureProbabilities::ZERO,
            "stoch1" => p(0.0, 0.0, 0.0, 0.0, 0.1),
            "stoch2" => p(0.0, 0.0, 0.0, 0.05, 0.1),
            "stoch3" => p(0.2, 0.2, 0.1, 0.05, 0.1),
            "stoch4" => p(0.3, 0.4, 0.2, 0.1, 0.2),
            other => return Err(SimError::UnknownProfile(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            probabilities,
            geometry: Geometry::default(),
            timing: Timing::default(),
            risky_path: None,
        })
    }

    pub fn with_risky_path(mut self, risk: PathRisk) -> Self {
        self.risky_path = Some(risk);
        self
    }

    /// Risks on the direct paths.
    pub fn direct_path_risk(&self) -> PathRisk {
        self.risky_path.unwrap_or(PathRisk {
            losing_cube: self.probabilities.losing_cube,
            losing_localization: self.probabilities.losing_localization,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut probs: Vec<(&str, f64)> = self.probabilities.as_array().to_vec();
        if let Some(r) = self.risky_path {
            probs.push(("risky_path.losing_cube", r.losing_cube));
            probs.push(("risky_path.losing_localization", r.losing_localization));
        }
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::InvalidProfile(format!("{name} = {value} is not a probability")));
            }
        }
        let g = &self.geometry;
        let coords = [g.start.x, g.start.y, g.pick.x, g.pick.y, g.goal.x, g.goal.y];
        if coords.iter().any(|c| !c.is_finite()) || !(g.reach_radius >= 0.0) || !(g.standoff >= 0.0) {
            return Err(SimError::InvalidProfile("geometry must be finite and non-negative".into()));
        }
        let t = &self.timing;
        let times = [t.localise, t.head, t.tuck, t.pick, t.place, t.safe_path_factor];
        if times.iter().any(|v| !(*v >= 0.0)) || !(t.travel_speed > 0.0) {
            return Err(SimError::InvalidProfile("timing values must be non-negative, speed positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot_true: Pose,
    pub robot_est: Pose,
    pub localized: bool,
    pub arm_tucked: bool,
    pub head: Head,
    pub holding_cube: bool,
    pub cube: Pose,
    /// Accumulated execution time T in seconds.
    pub elapsed_time: f64,
    /// Accumulated nominal failure probability P.
    pub risk_sum: f64,
    pub picked_once: bool,
    pub placed_at_goal: bool,
    pub root_failures: u32,
}

impl WorldState {
    pub fn reset(profile: &Profile) -> Self {
        let g = &profile.geometry;
        Self {
            robot_true: g.start,
            robot_est: g.start.offset(0.0, LOST_LOC_ERROR),
            localized: false,
            arm_tucked: false,
            head: Head::Up,
            holding_cube: false,
            cube: g.pick,
            elapsed_time: 0.0,
            risk_sum: 0.0,
            picked_once: false,
            placed_at_goal: false,
            root_failures: 0,
        }
    }

    /// Distance between the true and the estimated robot pose.
    pub fn loc_error(&self) -> f64 {
        self.robot_true.distance(self.robot_est)
    }

    pub fn robot_cube_distance(&self) -> f64 {
        if self.holding_cube {
            0.0
        } else {
            self.robot_true.distance(self.cube)
        }
    }

    fn set_robot(&mut self, pose: Pose) {
        let (dx, dy) = (self.robot_est.x - self.robot_true.x, self.robot_est.y - self.robot_true.y);
        self.robot_true = pose;
        self.robot_est = pose.offset(dx, dy);
        if self.holding_cube {
            self.cube = pose;
        }
    }

    fn lose_localization(&mut self) {
        self.localized = false;
        self.robot_est = self.robot_true.offset(0.0, LOST_LOC_ERROR);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Short path exposed to the profile's navigation risks.
    Direct,
    /// Longer path without navigation risk.
    Detour,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Effect {
    Localise,
    HeadUp,
    HeadDown,
    Tuck,
    Pick,
    Place,
    MoveTo { target: Pose, route: Route },
    HaveBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeCost {
    Fixed(f64),
    /// Seconds per metre of path.
    Travel(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub name: String,
    pub kind: LeafKind,
    pub effect: Effect,
    pub time_cost: TimeCost,
    /// Nominal failure probability. For navigation this is the chance of
    /// losing localization; the cube risk is carried in `path_risk`.
    pub fail_prob: f64,
    pub path_risk: PathRisk,
}

impl BehaviorSpec {
    /// Time charged for executing in `state`, whatever the outcome.
    pub fn duration(&self, state: &WorldState) -> f64 {
        match (self.time_cost, self.effect) {
            (TimeCost::Fixed(t), _) => t,
            (TimeCost::Travel(pace), Effect::MoveTo { target, .. }) => pace * state.robot_true.distance(target),
            (TimeCost::Travel(_), _) => 0.0,
        }
    }

    /// Nominal risk added to P for executing in `state`, whatever the outcome.
    pub fn risk(&self, state: &WorldState) -> f64 {
        match self.effect {
            Effect::MoveTo { .. } if state.holding_cube => self.fail_prob + self.path_risk.losing_cube,
            _ => self.fail_prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Core9,
    LowNoise,
    HighNoise,
    SafePaths,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Core9 => "core9",
            PoolKind::LowNoise => "low_noise",
            PoolKind::HighNoise => "high_noise",
            PoolKind::SafePaths => "safe_paths",
        }
    }
}

impl FromStr for PoolKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "core9" => Ok(PoolKind::Core9),
            "low_noise" => Ok(PoolKind::LowNoise),
            "high_noise" => Ok(PoolKind::HighNoise),
            "safe_paths" => Ok(PoolKind::SafePaths),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const CORE_BEHAVIORS: [&str; 9] = [
    "localise",
    "head_up",
    "head_down",
    "tuck",
    "pick",
    "place",
    "move_to_pick",
    "move_to_goal",
    "have_block",
];

/// Distractor destinations: a 6 x 5 lattice over [-3, 3] x [-2, 2].
///
/// Lattice points within reach of either table are pushed radially out to
/// just beyond reach, so they lead close to the cube or the goal without
/// being useful. The first three entries form the low-noise set.
pub fn distractor_targets(geometry: &Geometry) -> Vec<Pose> {
    let mut lattice = Vec::with_capacity(30);
    for row in 0..5 {
        for col in 0..6 {
            lattice.push(Pose::new(-3.0 + 1.2 * col as f64, -2.0 + 1.0 * row as f64));
        }
    }
    let clear = geometry.reach_radius + 0.1;
    for pose in lattice.iter_mut() {
        for table in [geometry.pick, geometry.goal] {
            let d = pose.distance(table);
            if d <= geometry.reach_radius {
                let (ux, uy) = if d > 0.0 {
                    ((pose.x - table.x) / d, (pose.y - table.y) / d)
                } else {
                    ((geometry.start.x - table.x).signum(), 0.0)
                };
                *pose = table.offset(ux * clear, uy * clear);
            }
        }
    }
    // Lead with the two near-table points and the centre of the arena.
    let near: Vec<usize> = lattice
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            (p.distance(geometry.pick) - clear).abs() < 1e-9 || (p.distance(geometry.goal) - clear).abs() < 1e-9
        })
        .map(|(i, _)| i)
        .collect();
    let centre = lattice
        .iter()
        .enumerate()
        .filter(|(i, _)| !near.contains(i))
        .min_by(|(_, a), (_, b)| a.distance(geometry.start).total_cmp(&b.distance(geometry.start)))
        .map(|(i, _)| i);
    let mut order: Vec<usize> = near.into_iter().chain(centre).collect();
    let rest: Vec<usize> = (0..lattice.len()).filter(|i| !order.contains(i)).collect();
    order.extend(rest);
    order.into_iter().map(|i| lattice[i]).collect()
}

/// The behaviors available to the search, with their resolved semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPool {
    kind: PoolKind,
    specs: Vec<BehaviorSpec>,
    vocab: Vocabulary,
}

impl BehaviorPool {
    pub fn new(kind: PoolKind, profile: &Profile) -> Self {
        let g = &profile.geometry;
        let t = &profile.timing;
        let p = &profile.probabilities;
        let direct = profile.direct_path_risk();
        let pace = 1.0 / t.travel_speed;
        let action = |name: &str, effect, time, fail_prob| BehaviorSpec {
            name: name.to_string(),
            kind: LeafKind::Action,
            effect,
            time_cost: TimeCost::Fixed(time),
            fail_prob,
            path_risk: PathRisk::NONE,
        };
        let mover = |name: String, target: Pose, route: Route| {
            let (risk, pace) = match route {
                Route::Direct => (direct, pace),
                Route::Detour => (PathRisk::NONE, pace * t.safe_path_factor),
            };
            BehaviorSpec {
                name,
                kind: LeafKind::Action,
                effect: Effect::MoveTo { target, route },
                time_cost: TimeCost::Travel(pace),
                fail_prob: risk.losing_localization,
                path_risk: risk,
            }
        };

        let mut specs = vec![
            action("localise", Effect::Localise, t.localise, p.localization_failure),
            action("head_up", Effect::HeadUp, t.head, 0.0),
            action("head_down", Effect::HeadDown, t.head, 0.0),
            action("tuck", Effect::Tuck, t.tuck, 0.0),
            action("pick", Effect::Pick, t.pick, p.pick_failure),
            action("place", Effect::Place, t.place, p.place_failure),
            mover("move_to_pick".into(), g.approach(g.pick), Route::Direct),
            mover("move_to_goal".into(), g.approach(g.goal), Route::Direct),
            BehaviorSpec {
                name: "have_block".into(),
                kind: LeafKind::Condition,
                effect: Effect::HaveBlock,
                time_cost: TimeCost::Fixed(0.0),
                fail_prob: 0.0,
                path_risk: PathRisk::NONE,
            },
        ];
        let distractors = match kind {
            PoolKind::Core9 | PoolKind::SafePaths => 0,
            PoolKind::LowNoise => 3,
            PoolKind::HighNoise => 30,
        };
        for (i, target) in distractor_targets(g).into_iter().take(distractors).enumerate() {
            specs.push(mover(format!("move_to_wp{i:02}"), target, Route::Direct));
        }
        if kind == PoolKind::SafePaths {
            specs.push(mover("move_to_pick_safe".into(), g.approach(g.pick), Route::Detour));
            specs.push(mover("move_to_goal_safe".into(), g.approach(g.goal), Route::Detour));
        }
        Self::from_specs(kind, specs)
    }

    fn from_specs(kind: PoolKind, specs: Vec<BehaviorSpec>) -> Self {
        let mut vocab = Vocabulary::new();
        for spec in &specs {
            vocab.push(spec.name.clone(), spec.kind).expect("behavior names are unique");
        }
        Self { kind, specs, vocab }
    }

    /// Keeps only the named behaviors, in the given order.
    pub fn restricted(&self, names: &[&str]) -> Result<Self, SimError> {
        let specs = names
            .iter()
            .map(|name| {
                self.vocab
                    .lookup(name)
                    .map(|id| self.specs[id.index()].clone())
                    .ok_or_else(|| SimError::Tree(BtError::UnknownBehavior(name.to_string())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_specs(self.kind, specs))
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn specs(&self) -> &[BehaviorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, id: LeafId) -> Option<&BehaviorSpec> {
        self.specs.get(id.index())
    }

    pub fn get(&self, name: &str) -> Option<&BehaviorSpec> {
        self.vocab.lookup(name).map(|id| &self.specs[id.index()])
    }

    pub fn is_distractor(&self, id: LeafId) -> bool {
        self.vocab.name(id).starts_with("move_to_wp")
    }
}

/// Profile plus behavior pool: everything an episode needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub profile: Profile,
    pub pool: BehaviorPool,
}

impl Scenario {
    pub fn new(profile: Profile, pool: PoolKind) -> Self {
        let pool = BehaviorPool::new(pool, &profile);
        Self { profile, pool }
    }

    pub fn builtin(profile: &str, pool: PoolKind) -> Result<Self, SimError> {
        Ok(Self::new(Profile::builtin(profile)?, pool))
    }

    pub fn with_pool(profile: Profile, pool: BehaviorPool) -> Self {
        Self { profile, pool }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.pool.vocab()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub max_root_failures: u32,
    pub max_ticks: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { max_root_failures: 5, max_ticks: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    RootSuccess,
    FailureBudget,
    TickBudget,
}

impl Termination {
    pub const ALL: [Termination; 3] = [Termination::RootSuccess, Termination::FailureBudget, Termination::TickBudget];

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::RootSuccess => "root_success",
            Termination::FailureBudget => "failure_budget",
            Termination::TickBudget => "tick_budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub final_state: WorldState,
    pub picked: bool,
    pub placed: bool,
    pub node_count: usize,
    pub ticks_used: u32,
    /// Place goal of the geometry the episode ran under.
    pub goal: Pose,
    pub terminated_by: Termination,
}

/// One executed behavior, as recorded by a logged episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub behavior: LeafId,
    pub status: TickStatus,
    pub time: f64,
    pub risk: f64,
    /// Whether the cube was held when the behavior started.
    pub holding_before: bool,
    pub robot: Pose,
    pub cube: Pose,
}

/// A world state bound to its scenario and random stream.
pub struct Episode<'a, R: Rng + ?Sized> {
    scenario: &'a Scenario,
    pub state: WorldState,
    rng: &'a mut R,
    log: Option<Vec<Step>>,
}

impl<'a, R: Rng + ?Sized> Episode<'a, R> {
    pub fn new(scenario: &'a Scenario, rng: &'a mut R) -> Self {
        Self { scenario, state: WorldState::reset(&scenario.profile), rng, log: None }
    }

    pub fn with_state(scenario: &'a Scenario, state: WorldState, rng: &'a mut R) -> Self {
        Self { scenario, state, rng, log: None }
    }

    pub fn logged(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn take_log(&mut self) -> Vec<Step> {
        self.log.take().unwrap_or_default()
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    fn apply(&mut self, spec: &BehaviorSpec) -> TickStatus {
        use TickStatus::{Failure, Success};
        let scenario: &'a Scenario = self.scenario;
        let g = &scenario.profile.geometry;
        let s = &mut self.state;
        match spec.effect {
            Effect::HaveBlock => {
                if s.holding_cube {
                    Success
                } else {
                    Failure
                }
            }
            Effect::HeadUp => {
                s.head = Head::Up;
                Success
            }
            Effect::HeadDown => {
                s.head = Head::Down;
                Success
            }
            Effect::Tuck => {
                s.arm_tucked = true;
                Success
            }
            Effect::Localise => {
                if self.chance(spec.fail_prob) {
                    return Failure;
                }
                let s = &mut self.state;
                s.localized = true;
                s.robot_est = s.robot_true.offset(0.0, LOCALIZED_LOC_ERROR);
                Success
            }
            Effect::Pick => {
                let ready = !s.holding_cube
                    && s.localized
                    && s.head == Head::Down
                    && s.robot_true.distance(s.cube) <= g.reach_radius;
                if !ready || self.chance(spec.fail_prob) {
                    return Failure;
                }
                let s = &mut self.state;
                s.holding_cube = true;
                s.cube = s.robot_true;
                s.picked_once = true;
                Success
            }
            Effect::Place => {
                let ready = s.holding_cube
                    && s.localized
                    && s.head == Head::Down
                    && s.robot_true.distance(g.goal) <= g.reach_radius;
                if !ready || self.chance(spec.fail_prob) {
                    return Failure;
                }
                let s = &mut self.state;
                s.holding_cube = false;
                s.cube = g.goal;
                s.placed_at_goal = true;
                Success
            }
            Effect::MoveTo { target, .. } => {
                if !(s.localized && s.arm_tucked && s.head == Head::Up) {
                    return Failure;
                }
                let holding = s.holding_cube;
                let lost = self.chance(spec.path_risk.losing_localization);
                let dropped = holding && self.chance(spec.path_risk.losing_cube);
                let pick = g.pick;
                let s = &mut self.state;
                if dropped {
                    s.holding_cube = false;
                    s.cube = pick;
                }
                if lost {
                    let midpoint = s.robot_true.lerp(target, 0.5);
                    s.set_robot(midpoint);
                    s.lose_localization();
                    Failure
                } else {
                    s.set_robot(target);
                    Success
                }
            }
        }
    }
}

impl<R: Rng + ?Sized> World for Episode<'_, R> {
    fn execute(&mut self, leaf: LeafId) -> Result<TickStatus, BtError> {
        let scenario = self.scenario;
        let spec = scenario
            .pool
            .spec(leaf)
            .ok_or_else(|| BtError::UnknownBehavior(format!("#{}", leaf.0)))?;
        let time = spec.duration(&self.state);
        let risk = spec.risk(&self.state);
        let holding = self.state.holding_cube;
        self.state.elapsed_time += time;
        self.state.risk_sum += risk;
        let status = self.apply(spec);
        if let Some(log) = self.log.as_mut() {
            log.push(Step {
                behavior: leaf,
                status,
                time,
                risk,
                holding_before: holding,
                robot: self.state.robot_true,
                cube: self.state.cube,
            });
        }
        Ok(status)
    }
}

/// Ticks the root until success or until a budget runs out.
///
/// The root is re-ticked after each failure while at most
/// `max_root_failures` failures have occurred.
pub fn run_episode<R: Rng + ?Sized>(
    tree: &BehaviorTree,
    scenario: &Scenario,
    budgets: Budgets,
    rng: &mut R,
) -> Result<EpisodeResult, SimError> {
    let mut episode = Episode::new(scenario, rng);
    drive(tree, &mut episode, budgets)
}

/// Like [`run_episode`] but also returns every executed behavior.
pub fn run_episode_logged<R: Rng + ?Sized>(
    tree: &BehaviorTree,
    scenario: &Scenario,
    budgets: Budgets,
    rng: &mut R,
) -> Result<(EpisodeResult, Vec<Step>), SimError> {
    let mut episode = Episode::new(scenario, rng).logged();
    let result = drive(tree, &mut episode, budgets)?;
    Ok((result, episode.take_log()))
}

fn drive<R: Rng + ?Sized>(
    tree: &BehaviorTree,
    episode: &mut Episode<'_, R>,
    budgets: Budgets,
) -> Result<EpisodeResult, SimError> {
    let mut ticks = 0;
    let terminated_by = loop {
        if ticks >= budgets.max_ticks {
            break Termination::TickBudget;
        }
        let status = tree.tick(episode)?;
        ticks += 1;
        match status {
            TickStatus::Success => break Termination::RootSuccess,
            TickStatus::Failure => {
                episode.state.root_failures += 1;
                if episode.state.root_failures > budgets.max_root_failures {
                    break Termination::FailureBudget;
                }
            }
            TickStatus::Running => {}
        }
    };
    let state = episode.state.clone();
    Ok(EpisodeResult {
        picked: state.picked_once,
        placed: state.placed_at_goal,
        final_state: state,
        node_count: tree.node_count(),
        ticks_used: ticks,
        goal: episode.scenario.profile.geometry.goal,
        terminated_by,
    })
}

/// Hand-written reactive solution of the task: fetch the cube unless it is
/// already held, then carry it to the goal.
pub const REFERENCE_SOLUTION: &str = "s( f( have_block s( localise tuck head_up move_to_pick head_down pick ) ) \
     localise head_up move_to_goal head_down place )";
