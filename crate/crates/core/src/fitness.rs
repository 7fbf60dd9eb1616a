//! Cost and fitness of an episode.
//!
//! The cost adds squared-distance shaping terms, a length penalty per node,
//! a time penalty and a risk penalty, and subtracts the pick and place
//! rewards. Fitness is the negated cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bt::BehaviorTree;
use crate::sim::{run_episode, Budgets, EpisodeResult, Scenario, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessWeights {
    /// Per squared metre between cube and goal.
    pub alpha1: f64,
    /// Per squared metre between robot and cube.
    pub alpha2: f64,
    /// Per squared metre of localization error.
    pub alpha3: f64,
    /// Per node.
    pub beta: f64,
    /// Per second.
    pub gamma: f64,
    /// Per unit of accumulated failure probability.
    pub delta: f64,
    pub pick_reward: f64,
    pub place_reward: f64,
}

impl FitnessWeights {
    pub const TABLE2: Self = Self {
        alpha1: 10.0,
        alpha2: 2.0,
        alpha3: 1.0,
        beta: 0.5,
        gamma: 0.1,
        delta: 0.0,
        pick_reward: 50.0,
        place_reward: 100.0,
    };

    pub fn builtin(name: &str) -> Option<Self> {
        (name == "table2").then_some(Self::TABLE2)
    }

    pub fn with_delta(self, delta: f64) -> Self {
        Self { delta, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.beta,
            self.gamma,
            self.delta,
            self.pick_reward,
            self.place_reward,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err("fitness weights must be finite and non-negative".into())
        }
    }
}

impl Default for FitnessWeights {
    fn default() -> Self {
        Self::TABLE2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub distance_term: f64,
    pub length_term: f64,
    pub time_term: f64,
    pub risk_term: f64,
    pub rewards: f64,
}

impl CostBreakdown {
    /// Total cost, always summed in the same order.
    pub fn total(&self) -> f64 {
        self.distance_term + self.length_term + self.time_term + self.risk_term - self.rewards
    }

    fn mean_of(items: &[CostBreakdown]) -> Self {
        let n = items.len() as f64;
        let sum = |f: fn(&CostBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            distance_term: sum(|b| b.distance_term),
            length_term: sum(|b| b.length_term),
            time_term: sum(|b| b.time_term),
            risk_term: sum(|b| b.risk_term),
            rewards: sum(|b| b.rewards),
        }
    }
}

/// Fitness J = -cost, with the cost terms that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue {
    pub fitness: f64,
    pub breakdown: CostBreakdown,
}

impl FitnessValue {
    pub fn from_breakdown(breakdown: CostBreakdown) -> Self {
        Self { fitness: -breakdown.total(), breakdown }
    }

    pub fn cost(&self) -> f64 {
        -self.fitness
    }

    /// Average of several values; J is recomputed from the mean terms.
    pub fn mean(values: &[FitnessValue]) -> Self {
        let terms: Vec<CostBreakdown> = values.iter().map(|v| v.breakdown).collect();
        Self::from_breakdown(CostBreakdown::mean_of(&terms))
    }

    /// Merges two means over `n` and `m` samples.
    pub fn merge(self, n: u32, other: FitnessValue, m: u32) -> Self {
        let (wn, wm) = (n as f64, m as f64);
        let w = |a: f64, b: f64| (a * wn + b * wm) / (wn + wm);
        let (a, b) = (self.breakdown, other.breakdown);
        Self::from_breakdown(CostBreakdown {
            distance_term: w(a.distance_term, b.distance_term),
            length_term: w(a.length_term, b.length_term),
            time_term: w(a.time_term, b.time_term),
            risk_term: w(a.risk_term, b.risk_term),
            rewards: w(a.rewards, b.rewards),
        })
    }
}

pub fn cost(result: &EpisodeResult, weights: &FitnessWeights) -> FitnessValue {
    let s = &result.final_state;
    let cube_goal = s.cube.distance(result.goal);
    let robot_cube = s.robot_cube_distance();
    let loc = s.loc_error();
    let distance_term =
        weights.alpha1 * cube_goal * cube_goal + weights.alpha2 * robot_cube * robot_cube + weights.alpha3 * loc * loc;
    let mut rewards = 0.0;
    if result.picked {
        rewards += weights.pick_reward;
    }
    if result.placed {
        rewards += weights.place_reward;
    }
    FitnessValue::from_breakdown(CostBreakdown {
        distance_term,
        length_term: weights.beta * result.node_count as f64,
        time_term: weights.gamma * s.elapsed_time,
        risk_term: weights.delta * s.risk_sum,
        rewards,
    })
}

/// Mean fitness over `episodes` independent episodes.
pub fn evaluate<R: Rng + ?Sized>(
    tree: &BehaviorTree,
    scenario: &Scenario,
    weights: &FitnessWeights,
    budgets: Budgets,
    episodes: usize,
    rng: &mut R,
) -> Result<FitnessValue, SimError> {
    let episodes = episodes.max(1);
    let mut values = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let result = run_episode(tree, scenario, budgets, rng)?;
        values.push(cost(&result, weights));
    }
    Ok(if episodes == 1 { values[0] } else { FitnessValue::mean(&values) })
}
