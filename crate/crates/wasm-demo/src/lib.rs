//! Browser front end for the behavior-tree GP: evolve a population in small
//! increments, replay a tree over many episodes, and trace one episode.
//!
//! The exported functions exchange JSON strings. The plain Rust API below
//! them is what the native tests exercise.

use btgp::bt::{is_valid, parse, Genotype};
use btgp::experiment::{replay, ReplayReport};
use btgp::fitness::{cost, FitnessWeights};
use btgp::gp::{stream_rng, Checkpoint, EpisodeEvaluator, Evolution, GpParams};
use btgp::sim::{run_episode_logged, Budgets, PoolKind, Pose, Profile, Scenario};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn scenario(profile: &str, pool: &str) -> Result<Scenario, String> {
    let pool: PoolKind = pool.parse().map_err(|e: btgp::sim::SimError| e.to_string())?;
    let profile = Profile::builtin(profile).map_err(|e| e.to_string())?;
    Ok(Scenario::new(profile, pool))
}

fn genotype(text: &str, scenario: &Scenario) -> Result<Genotype, String> {
    let g = Genotype::parse_text(text.trim(), scenario.vocab()).map_err(|e| e.to_string())?;
    if !is_valid(&g, scenario.vocab()).map_err(|e| e.to_string())? {
        return Err("tree violates the structural constraints".into());
    }
    Ok(g)
}

/// A GP run that advances a few generations per call.
pub struct Session {
    scenario: Scenario,
    weights: FitnessWeights,
    checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_tree: String,
    pub total_episodes: u64,
    /// Best fitness of each generation added by this call.
    pub curve: Vec<f64>,
}

impl Session {
    pub fn create(profile: &str, pool: &str, seed: u64, delta: f64) -> Result<Self, String> {
        let scenario = scenario(profile, pool)?;
        let weights = FitnessWeights::TABLE2.with_delta(delta);
        weights.validate()?;
        let params = GpParams { seed, generations: 0, parallel: false, ..GpParams::default() };
        let evaluator = EpisodeEvaluator::new(&scenario, weights);
        let checkpoint = Evolution::new(params, scenario.vocab(), &evaluator).map_err(|e| e.to_string())?.checkpoint();
        Ok(Self { scenario, weights, checkpoint })
    }

    pub fn progress(&self, from: usize) -> Progress {
        let history = &self.checkpoint.history;
        let last = history.last().expect("history starts with generation 0");
        Progress {
            generation: self.checkpoint.generation,
            best_fitness: last.best_fitness,
            best_tree: last.best_genotype.clone(),
            total_episodes: self.checkpoint.total_episodes,
            curve: history[from.min(history.len())..].iter().map(|s| s.best_fitness).collect(),
        }
    }

    pub fn advance(&mut self, generations: usize) -> Result<Progress, String> {
        let from = self.checkpoint.history.len();
        let params = GpParams { generations: self.checkpoint.generation + generations, ..self.checkpoint.params.clone() };
        let evaluator = EpisodeEvaluator::new(&self.scenario, self.weights);
        let mut evolution = Evolution::resume(self.checkpoint.clone(), params, self.scenario.vocab(), &evaluator)
            .map_err(|e| e.to_string())?;
        evolution.run_to_end().map_err(|e| e.to_string())?;
        self.checkpoint = evolution.checkpoint();
        Ok(self.progress(from))
    }
}

pub fn replay_stats(tree: &str, profile: &str, pool: &str, delta: f64, episodes: usize, seed: u64) -> Result<ReplayReport, String> {
    let scenario = scenario(profile, pool)?;
    let g = genotype(tree, &scenario)?;
    replay(&g, &scenario, &FitnessWeights::TABLE2.with_delta(delta), episodes, seed).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub behavior: String,
    pub success: bool,
    pub time: f64,
    pub robot: Pose,
    pub cube: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub start: Pose,
    pub pick: Pose,
    pub goal: Pose,
    pub reach: f64,
    pub steps: Vec<TraceStep>,
    pub placed: bool,
    pub fitness: f64,
    pub termination: String,
}

pub fn episode_trace(tree: &str, profile: &str, pool: &str, seed: u64) -> Result<Trace, String> {
    let scenario = scenario(profile, pool)?;
    let g = genotype(tree, &scenario)?;
    let bt = parse(&g, scenario.vocab()).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(seed, 0);
    let (result, log) = run_episode_logged(&bt, &scenario, Budgets::default(), &mut rng).map_err(|e| e.to_string())?;
    let geometry = scenario.profile.geometry;
    Ok(Trace {
        start: geometry.start,
        pick: geometry.pick,
        goal: geometry.goal,
        reach: geometry.reach_radius,
        steps: log
            .into_iter()
            .map(|s| TraceStep {
                behavior: scenario.vocab().name(s.behavior).to_string(),
                success: s.status == btgp::bt::TickStatus::Success,
                time: s.time,
                robot: s.robot,
                cube: s.cube,
            })
            .collect(),
        placed: result.placed,
        fitness: cost(&result, &FitnessWeights::TABLE2).fitness,
        termination: result.terminated_by.as_str().to_string(),
    })
}

fn js<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct Evolver(Session);

#[wasm_bindgen]
impl Evolver {
    #[wasm_bindgen(constructor)]
    pub fn new(profile: &str, pool: &str, seed: u32, delta: f64) -> Result<Evolver, JsValue> {
        Session::create(profile, pool, seed.into(), delta).map(Evolver).map_err(|e| JsValue::from_str(&e))
    }

    /// Runs `generations` more generations; returns progress as JSON.
    pub fn step(&mut self, generations: u32) -> Result<String, JsValue> {
        js(self.0.advance(generations as usize))
    }

    /// Progress since generation 0 as JSON.
    pub fn snapshot(&self) -> Result<String, JsValue> {
        js(Ok(self.0.progress(0)))
    }
}

/// Monte Carlo statistics of a tree, as JSON.
#[wasm_bindgen]
pub fn replay_tree(tree: &str, profile: &str, pool: &str, delta: f64, episodes: u32, seed: u32) -> Result<String, JsValue> {
    js(replay_stats(tree, profile, pool, delta, episodes as usize, seed.into()))
}

/// Every executed behavior of one episode, as JSON.
#[wasm_bindgen]
pub fn trace_tree(tree: &str, profile: &str, pool: &str, seed: u32) -> Result<String, JsValue> {
    js(episode_trace(tree, profile, pool, seed.into()))
}
