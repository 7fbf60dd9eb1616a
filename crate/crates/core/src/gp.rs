//! Genetic programming over behavior-tree genotypes.
//!
//! Each generation, tournament-selected parents produce 2N offspring (four
//! per crossover pair, two per mutation parent). The next population keeps
//! the elite fraction of parents and offspring and fills the remaining slots
//! by another tournament over everyone.
//!
//! Randomness comes from two places. Genetic operators and selection draw
//! from one master stream. Every fitness evaluation draws from its own
//! stream, derived from the seed, the generation and the individual's
//! index, so serial and parallel evaluation give identical results.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt::{
    is_valid, parse, random_genotype, repair, BtError, ControlKind, Genotype, LeafId, Token, Vocabulary,
    DEFAULT_NODE_CAP, MAX_ATTEMPTS,
};
use crate::fitness::{evaluate, FitnessValue, FitnessWeights};
use crate::sim::{Budgets, Scenario, SimError};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("tournament asked for {slots} survivors out of {candidates} candidates")]
    SlotsExceedCandidates { slots: usize, candidates: usize },
    #[error("invalid GP parameters: {0}")]
    InvalidParams(String),
    #[error("checkpoint does not match this run: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tree(#[from] BtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpParams {
    pub population: usize,
    /// Node count of the initial random trees.
    pub start_length: usize,
    pub generations: usize,
    pub crossover_fraction: f64,
    pub mutation_fraction: f64,
    pub elitism_fraction: f64,
    pub p_node_mutation: f64,
    pub p_node_addition: f64,
    pub p_node_deletion: f64,
    pub p_control_node: f64,
    pub episodes_per_eval: usize,
    pub seed: u64,
    pub node_cap: usize,
    /// Re-run the elites every generation and keep a running mean of
    /// their fitness instead of the score they were born with.
    pub reevaluate_elites: bool,
    /// Extra episodes given to every member of the last population before
    /// the best individual is picked. Zero disables the step.
    pub final_validation_episodes: usize,
    /// Stop once the best fitness has not changed for this many generations.
    pub early_stop_window: Option<usize>,
    pub uniqueness: Uniqueness,
    pub parallel: bool,
}

/// Which genotypes a new offspring may not duplicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uniqueness {
    /// Only the other offspring of the same parents.
    Pair,
    /// The current population and every offspring created so far this generation.
    #[default]
    Generation,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            population: 30,
            start_length: 4,
            generations: 8000,
            crossover_fraction: 0.40,
            mutation_fraction: 0.60,
            elitism_fraction: 0.10,
            p_node_mutation: 0.30,
            p_node_addition: 0.40,
            p_node_deletion: 0.30,
            p_control_node: 0.50,
            episodes_per_eval: 1,
            seed: 0,
            node_cap: DEFAULT_NODE_CAP,
            reevaluate_elites: false,
            final_validation_episodes: 0,
            early_stop_window: None,
            uniqueness: Uniqueness::default(),
            parallel: true,
        }
    }
}

/// Round half up.
fn share(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5).floor() as usize
}

impl GpParams {
    pub fn crossover_parents(&self) -> usize {
        share(self.population, self.crossover_fraction)
    }

    pub fn mutation_parents(&self) -> usize {
        share(self.population, self.mutation_fraction)
    }

    pub fn elites(&self) -> usize {
        share(self.population, self.elitism_fraction)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let bad = |msg: &str| Err(GpError::InvalidParams(msg.to_string()));
        if self.population < 2 {
            return bad("population must hold at least two individuals");
        }
        let fractions = [self.crossover_fraction, self.mutation_fraction, self.elitism_fraction, self.p_control_node];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("fractions and probabilities must lie in [0, 1]");
        }
        let ops = [self.p_node_mutation, self.p_node_addition, self.p_node_deletion];
        if ops.iter().any(|p| !(0.0..=1.0).contains(p)) || (ops.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mutation operator probabilities must sum to 1");
        }
        if self.start_length == 0 || self.node_cap == 0 || self.start_length > self.node_cap {
            return bad("start length must be between 1 and the node cap");
        }
        if self.episodes_per_eval == 0 {
            return bad("episodes_per_eval must be at least 1");
        }
        if self.elites() > self.population {
            return bad("more elites than population slots");
        }
        if self.crossover_parents() > self.population || self.mutation_parents() > self.population {
            return bad("parent pools cannot exceed the population");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genotype: Genotype,
    pub fitness: Option<FitnessValue>,
    /// Episodes behind `fitness`.
    pub evaluations: u32,
    pub birth_generation: usize,
}

impl Individual {
    pub fn new(genotype: Genotype, birth_generation: usize) -> Self {
        Self { genotype, fitness: None, evaluations: 0, birth_generation }
    }

    /// Fitness J, or negative infinity before evaluation.
    pub fn score(&self) -> f64 {
        self.fitness.map_or(f64::NEG_INFINITY, |f| f.fitness)
    }

    fn absorb(&mut self, value: FitnessValue, episodes: u32) {
        self.fitness = Some(match self.fitness {
            None => value,
            Some(old) => old.merge(self.evaluations, value, episodes),
        });
        self.evaluations += episodes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_genotype: String,
    /// Episodes simulated while producing this generation.
    pub episodes: u64,
    pub total_episodes: u64,
}

/// Scores a genotype by simulation.
pub trait Evaluator: Sync {
    fn evaluate(&self, genotype: &Genotype, episodes: usize, rng: &mut ChaCha8Rng) -> Result<FitnessValue, GpError>;
}

/// Runs the genotype in a scenario and scores the outcome.
pub struct EpisodeEvaluator<'a> {
    pub scenario: &'a Scenario,
    pub weights: FitnessWeights,
    pub budgets: Budgets,
}

impl<'a> EpisodeEvaluator<'a> {
    pub fn new(scenario: &'a Scenario, weights: FitnessWeights) -> Self {
        Self { scenario, weights, budgets: Budgets::default() }
    }
}

impl Evaluator for EpisodeEvaluator<'_> {
    fn evaluate(&self, genotype: &Genotype, episodes: usize, rng: &mut ChaCha8Rng) -> Result<FitnessValue, GpError> {
        let tree = parse(genotype, self.scenario.vocab())?;
        Ok(evaluate(&tree, self.scenario, &self.weights, self.budgets, episodes, rng)?)
    }
}

/// What an evaluation stream is used for.
#[derive(Debug, Clone, Copy)]
enum Purpose {
    Birth = 0,
    Elite = 1,
    Validation = 2,
}

/// Independent random stream `stream` of the run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn eval_stream(purpose: Purpose, generation: usize, index: usize) -> u64 {
    ((purpose as u64) << 56) | ((generation as u64 & 0xFFFF_FFFF) << 24) | (index as u64 & 0xFF_FFFF)
}

const MASTER_STREAM: u64 = u64::MAX;

fn evaluate_batch<E: Evaluator>(
    individuals: &mut [Individual],
    evaluator: &E,
    params: &GpParams,
    episodes: usize,
    generation: usize,
    purpose: Purpose,
) -> Result<u64, GpError> {
    let run = |(index, ind): (usize, &mut Individual)| -> Result<(), GpError> {
        let mut rng = stream_rng(params.seed, eval_stream(purpose, generation, index));
        let value = evaluator.evaluate(&ind.genotype, episodes, &mut rng)?;
        ind.absorb(value, episodes as u32);
        Ok(())
    };
    #[cfg(feature = "parallel")]
    {
        if params.parallel {
            use rayon::prelude::*;
            individuals.par_iter_mut().enumerate().try_for_each(run)?;
            return Ok((individuals.len() * episodes) as u64);
        }
    }
    individuals.iter_mut().enumerate().try_for_each(run)?;
    Ok((individuals.len() * episodes) as u64)
}

fn random_node<R: Rng + ?Sized>(genotype: &Genotype, rng: &mut R) -> usize {
    let k = rng.gen_range(0..genotype.node_count());
    genotype.node_positions().nth(k).expect("k < node count")
}

fn acceptable(genotype: &Genotype, vocab: &Vocabulary, node_cap: usize) -> bool {
    genotype.node_count() <= node_cap && is_valid(genotype, vocab).unwrap_or(false)
}

fn splice(tokens: &[Token], range: Range<usize>, replacement: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(tokens.len() - range.len() + replacement.len());
    out.extend_from_slice(&tokens[..range.start]);
    out.extend_from_slice(replacement);
    out.extend_from_slice(&tokens[range.end..]);
    out
}

/// Exchanges the subtree at `span_a` of `a` with the one at `span_b` of `b`.
pub fn swap_subtrees(a: &Genotype, span_a: Range<usize>, b: &Genotype, span_b: Range<usize>) -> (Genotype, Genotype) {
    let first = splice(a.tokens(), span_a.clone(), &b.tokens()[span_b.clone()]);
    let second = splice(b.tokens(), span_b, &a.tokens()[span_a]);
    (Genotype::from_tokens_unchecked(first), Genotype::from_tokens_unchecked(second))
}

/// Subtree-swapping crossover with uniformly drawn crossover points.
///
/// Points are redrawn until both offspring are valid, within the node cap
/// and different from each other; after [`MAX_ATTEMPTS`] the parents are
/// returned unchanged.
pub fn crossover<R: Rng + ?Sized>(
    first: &Genotype,
    second: &Genotype,
    vocab: &Vocabulary,
    node_cap: usize,
    rng: &mut R,
) -> (Genotype, Genotype) {
    try_crossover(first, second, vocab, node_cap, rng).unwrap_or_else(|| (first.clone(), second.clone()))
}

fn try_crossover<R: Rng + ?Sized>(
    first: &Genotype,
    second: &Genotype,
    vocab: &Vocabulary,
    node_cap: usize,
    rng: &mut R,
) -> Option<(Genotype, Genotype)> {
    for _ in 0..MAX_ATTEMPTS {
        let i = random_node(first, rng);
        let j = random_node(second, rng);
        let span_i = first.subtree_span(i).expect("node position");
        let span_j = second.subtree_span(j).expect("node position");
        let (a, b) = swap_subtrees(first, span_i, second, span_j);
        if a != b && acceptable(&a, vocab, node_cap) && acceptable(&b, vocab, node_cap) {
            return Some((a, b));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    Replace,
    Insert,
    Delete,
}

/// A node drawn from the gene pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolNode {
    Leaf(LeafId),
    Control(ControlKind),
}

fn draw_pool_node<R: Rng + ?Sized>(vocab: &Vocabulary, p_control: f64, rng: &mut R) -> PoolNode {
    if rng.gen_bool(p_control) {
        PoolNode::Control(if rng.gen_bool(0.5) { ControlKind::Sequence } else { ControlKind::Fallback })
    } else {
        PoolNode::Leaf(vocab.random_leaf(rng))
    }
}

/// Turns the node at token `at` into `node`.
///
/// A control keeps its children when it changes kind and loses them when it
/// becomes a leaf; a leaf that becomes a control keeps itself as the only
/// child.
pub fn replace_node(genotype: &Genotype, at: usize, node: PoolNode) -> Result<Genotype, BtError> {
    let span = genotype.subtree_span(at)?;
    let tokens = genotype.tokens();
    let out = match (tokens[at], node) {
        (Token::Open(_), PoolNode::Control(kind)) => {
            let mut t = tokens.to_vec();
            t[at] = Token::Open(kind);
            t
        }
        (Token::Open(_), PoolNode::Leaf(id)) => splice(tokens, span, &[Token::Leaf(id)]),
        (Token::Leaf(_), PoolNode::Leaf(id)) => splice(tokens, span, &[Token::Leaf(id)]),
        (Token::Leaf(old), PoolNode::Control(kind)) => {
            splice(tokens, span, &[Token::Open(kind), Token::Leaf(old), Token::Close])
        }
        (Token::Close, _) => return Err(BtError::NotANode(at)),
    };
    Ok(Genotype::from_tokens_unchecked(out))
}

/// Inserts `node` before token `at`, as a sibling in the enclosing scope.
///
/// A new control node comes with one leaf child, `child`. Inserting into a
/// single-leaf genotype wraps both in a new root of kind `root_kind`; `at`
/// then selects whether the new node goes first (0) or last (1).
pub fn insert_node(
    genotype: &Genotype,
    at: usize,
    node: PoolNode,
    child: LeafId,
    root_kind: ControlKind,
) -> Result<Genotype, BtError> {
    let fresh: Vec<Token> = match node {
        PoolNode::Leaf(id) => vec![Token::Leaf(id)],
        PoolNode::Control(kind) => vec![Token::Open(kind), Token::Leaf(child), Token::Close],
    };
    let tokens = genotype.tokens();
    if tokens.len() == 1 {
        let mut out = vec![Token::Open(root_kind)];
        if at == 0 {
            out.extend_from_slice(&fresh);
            out.push(tokens[0]);
        } else {
            out.push(tokens[0]);
            out.extend_from_slice(&fresh);
        }
        out.push(Token::Close);
        return Ok(Genotype::from_tokens_unchecked(out));
    }
    if at == 0 || at >= tokens.len() {
        return Err(BtError::IndexOutOfRange { index: at, len: tokens.len() });
    }
    Ok(Genotype::from_tokens_unchecked(splice(tokens, at..at, &fresh)))
}

/// Removes the node at token `at` together with its subtree.
pub fn delete_node(genotype: &Genotype, at: usize) -> Result<Genotype, BtError> {
    let span = genotype.subtree_span(at)?;
    if span == (0..genotype.len()) {
        return Err(BtError::Malformed("cannot delete the root".into()));
    }
    Ok(Genotype::from_tokens_unchecked(splice(genotype.tokens(), span, &[])))
}

fn draw_op<R: Rng + ?Sized>(params: &GpParams, single_leaf: bool, rng: &mut R) -> MutationOp {
    loop {
        let u: f64 = rng.gen();
        let op = if u < params.p_node_mutation {
            MutationOp::Replace
        } else if u < params.p_node_mutation + params.p_node_addition {
            MutationOp::Insert
        } else {
            MutationOp::Delete
        };
        if !(single_leaf && op == MutationOp::Delete) {
            return op;
        }
    }
}

fn apply_op<R: Rng + ?Sized>(
    parent: &Genotype,
    op: MutationOp,
    vocab: &Vocabulary,
    params: &GpParams,
    rng: &mut R,
) -> Result<Genotype, BtError> {
    match op {
        MutationOp::Replace => {
            let at = random_node(parent, rng);
            let node = draw_pool_node(vocab, params.p_control_node, rng);
            replace_node(parent, at, node)
        }
        MutationOp::Insert => {
            let node = draw_pool_node(vocab, params.p_control_node, rng);
            let child = vocab.random_leaf(rng);
            let root_kind = if rng.gen_bool(0.5) { ControlKind::Sequence } else { ControlKind::Fallback };
            let at = if parent.len() == 1 { rng.gen_range(0..2) } else { rng.gen_range(1..parent.len()) };
            insert_node(parent, at, node, child, root_kind)
        }
        MutationOp::Delete => {
            let k = rng.gen_range(1..parent.node_count());
            let at = parent.node_positions().nth(k).expect("k < node count");
            delete_node(parent, at)
        }
    }
}

/// Node mutation, addition or deletion, drawn with the configured odds.
///
/// Redraws until the child is valid, within the node cap and different from
/// the parent. After [`MAX_ATTEMPTS`] the last attempt is repaired; if that
/// still fails the parent is returned.
pub fn mutate<R: Rng + ?Sized>(parent: &Genotype, vocab: &Vocabulary, params: &GpParams, rng: &mut R) -> Genotype {
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let op = draw_op(params, parent.len() == 1, rng);
        let Ok(child) = apply_op(parent, op, vocab, params, rng) else { continue };
        if child != *parent && acceptable(&child, vocab, params.node_cap) {
            return child;
        }
        last = Some(child);
    }
    last.and_then(|c| repair(&c, vocab).ok())
        .filter(|c| c.node_count() <= params.node_cap)
        .unwrap_or_else(|| parent.clone())
}

fn pick_uniform<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> usize {
    items[rng.gen_range(0..items.len())]
}

/// Pairwise duels until `slots` survivors remain.
///
/// The best candidate always survives and, when anyone is eliminated, the
/// worst never does. Ties in a duel are broken uniformly at random. Returns
/// indices into `scores`.
pub fn tournament_indices<R: Rng + ?Sized>(scores: &[f64], slots: usize, rng: &mut R) -> Result<Vec<usize>, GpError> {
    let n = scores.len();
    if slots > n {
        return Err(GpError::SlotsExceedCandidates { slots, candidates: n });
    }
    if slots == n {
        return Ok((0..n).collect());
    }
    if slots == 0 {
        return Ok(Vec::new());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tops: Vec<usize> = (0..n).filter(|&i| scores[i] == max).collect();
    let best = if tops.is_empty() { 0 } else { pick_uniform(&tops, rng) };
    let min = (0..n).filter(|&i| i != best).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
    let bottoms: Vec<usize> = (0..n).filter(|&i| i != best && scores[i] == min).collect();
    let worst = if bottoms.is_empty() {
        (0..n).find(|&i| i != best).expect("at least two candidates")
    } else {
        pick_uniform(&bottoms, rng)
    };

    let need = slots - 1;
    let mut pool: Vec<usize> = (0..n).filter(|&i| i != best && i != worst).collect();
    while pool.len() > need {
        pool.shuffle(rng);
        let duels = (pool.len() / 2).min(pool.len() - need);
        if duels == 0 {
            pool.truncate(need);
            break;
        }
        let mut losers = Vec::with_capacity(duels);
        for d in 0..duels {
            let (a, b) = (pool[2 * d], pool[2 * d + 1]);
            let loser = match scores[a].total_cmp(&scores[b]) {
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Equal => {
                    if rng.gen_bool(0.5) {
                        a
                    } else {
                        b
                    }
                }
            };
            losers.push(loser);
        }
        pool.retain(|i| !losers.contains(i));
    }
    let mut out = Vec::with_capacity(slots);
    out.push(best);
    out.extend(pool);
    Ok(out)
}

pub fn tournament<R: Rng + ?Sized>(candidates: &[Individual], slots: usize, rng: &mut R) -> Result<Vec<usize>, GpError> {
    let scores: Vec<f64> = candidates.iter().map(Individual::score).collect();
    tournament_indices(&scores, slots, rng)
}

/// Result of one generation step.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub population: Vec<Individual>,
    pub offspring: Vec<Individual>,
    pub stats: GenerationStats,
}

fn stats_for(population: &[Individual], vocab: &Vocabulary, generation: usize, episodes: u64, total: u64) -> GenerationStats {
    let best = population
        .iter()
        .max_by(|a, b| a.score().total_cmp(&b.score()))
        .expect("population is never empty");
    let mean = population.iter().map(Individual::score).sum::<f64>() / population.len() as f64;
    GenerationStats {
        generation,
        best_fitness: best.score(),
        mean_fitness: mean,
        best_genotype: best.genotype.to_text(vocab),
        episodes,
        total_episodes: total,
    }
}

fn fresh(g: &Genotype, seen: &HashSet<Genotype>, local: &[Genotype]) -> bool {
    !seen.contains(g) && !local.contains(g)
}

/// A mutant of `parent` that is neither in `seen` nor in `local`, if one
/// turns up within the retry budget.
fn fresh_mutant<R: Rng + ?Sized>(
    parent: &Genotype,
    vocab: &Vocabulary,
    params: &GpParams,
    seen: &HashSet<Genotype>,
    local: &[Genotype],
    rng: &mut R,
) -> Genotype {
    let mut child = mutate(parent, vocab, params, rng);
    for _ in 1..MAX_ATTEMPTS {
        if fresh(&child, seen, local) {
            break;
        }
        child = mutate(parent, vocab, params, rng);
    }
    child
}

/// Produces the next population from an evaluated one.
///
/// `generation` is the index of the generation being created.
pub fn evolve_generation<E: Evaluator, R: Rng + ?Sized>(
    population: &[Individual],
    vocab: &Vocabulary,
    evaluator: &E,
    params: &GpParams,
    generation: usize,
    total_episodes: u64,
    rng: &mut R,
) -> Result<GenerationOutcome, GpError> {
    let mut offspring: Vec<Individual> = Vec::with_capacity(2 * population.len());

    // Genotypes an offspring must not copy.
    let mut seen: HashSet<Genotype> = match params.uniqueness {
        Uniqueness::Pair => HashSet::new(),
        Uniqueness::Generation => population.iter().map(|i| i.genotype.clone()).collect(),
    };

    let mut cross_parents = tournament(population, params.crossover_parents(), rng)?;
    cross_parents.shuffle(rng);
    for pair in cross_parents.chunks_exact(2) {
        let (a, b) = (&population[pair[0]].genotype, &population[pair[1]].genotype);
        let mut kids: Vec<Genotype> = Vec::with_capacity(4);
        for _ in 0..2 {
            let mut attempts = 0;
            let (x, y) = loop {
                attempts += 1;
                let Some((x, y)) = try_crossover(a, b, vocab, params.node_cap, rng) else {
                    break (a.clone(), b.clone());
                };
                if (fresh(&x, &seen, &kids) && fresh(&y, &seen, &kids)) || attempts >= MAX_ATTEMPTS {
                    break (x, y);
                }
            };
            for (child, parent) in [(x, a), (y, b)] {
                let child = match params.uniqueness {
                    Uniqueness::Generation if !fresh(&child, &seen, &kids) => {
                        fresh_mutant(parent, vocab, params, &seen, &kids, rng)
                    }
                    _ => child,
                };
                kids.push(child);
            }
        }
        if params.uniqueness == Uniqueness::Generation {
            seen.extend(kids.iter().cloned());
        }
        offspring.extend(kids.into_iter().map(|g| Individual::new(g, generation)));
    }

    for parent in tournament(population, params.mutation_parents(), rng)? {
        let genotype = &population[parent].genotype;
        let mut kids: Vec<Genotype> = Vec::with_capacity(2);
        for _ in 0..2 {
            let child = fresh_mutant(genotype, vocab, params, &seen, &kids, rng);
            kids.push(child);
        }
        if params.uniqueness == Uniqueness::Generation {
            seen.extend(kids.iter().cloned());
        }
        offspring.extend(kids.into_iter().map(|g| Individual::new(g, generation)));
    }

    let mut episodes =
        evaluate_batch(&mut offspring, evaluator, params, params.episodes_per_eval, generation, Purpose::Birth)?;

    let mut everyone: Vec<Individual> = population.iter().cloned().chain(offspring.iter().cloned()).collect();
    let mut order: Vec<usize> = (0..everyone.len()).collect();
    order.sort_by(|&a, &b| everyone[b].score().total_cmp(&everyone[a].score()));
    let elites: Vec<usize> = order[..params.elites()].to_vec();

    let rest: Vec<usize> = (0..everyone.len()).filter(|i| !elites.contains(i)).collect();
    let rest_scores: Vec<f64> = rest.iter().map(|&i| everyone[i].score()).collect();
    let survivors = tournament_indices(&rest_scores, params.population - elites.len(), rng)?;

    let mut next: Vec<Individual> = Vec::with_capacity(params.population);
    for &i in &elites {
        next.push(std::mem::replace(&mut everyone[i], Individual::new(Genotype::leaf(LeafId(0)), 0)));
    }
    for s in survivors {
        let i = rest[s];
        next.push(std::mem::replace(&mut everyone[i], Individual::new(Genotype::leaf(LeafId(0)), 0)));
    }

    if params.reevaluate_elites && !elites.is_empty() {
        let n = elites.len();
        episodes +=
            evaluate_batch(&mut next[..n], evaluator, params, params.episodes_per_eval, generation, Purpose::Elite)?;
    }

    let stats = stats_for(&next, vocab, generation, episodes, total_episodes + episodes);
    Ok(GenerationOutcome { population: next, offspring, stats })
}

/// Full history of a finished run and its best individual.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<GenerationStats>,
    pub best: Individual,
    pub population: Vec<Individual>,
    pub total_episodes: u64,
}

/// A run in progress; can be stepped, checkpointed and resumed.
pub struct Evolution<'a, E: Evaluator> {
    params: GpParams,
    vocab: &'a Vocabulary,
    evaluator: &'a E,
    rng: ChaCha8Rng,
    population: Vec<Individual>,
    offspring: Vec<Individual>,
    generation: usize,
    history: Vec<GenerationStats>,
    total_episodes: u64,
    unchanged_for: usize,
}

impl<'a, E: Evaluator> Evolution<'a, E> {
    /// Draws and evaluates the initial population (generation 0).
    pub fn new(params: GpParams, vocab: &'a Vocabulary, evaluator: &'a E) -> Result<Self, GpError> {
        params.validate()?;
        let mut rng = stream_rng(params.seed, MASTER_STREAM);
        let mut population = (0..params.population)
            .map(|_| random_genotype(vocab, params.start_length, params.p_control_node, &mut rng).map(|g| Individual::new(g, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        let episodes = evaluate_batch(&mut population, evaluator, &params, params.episodes_per_eval, 0, Purpose::Birth)?;
        let stats = stats_for(&population, vocab, 0, episodes, episodes);
        Ok(Self {
            params,
            vocab,
            evaluator,
            rng,
            population,
            offspring: Vec::new(),
            generation: 0,
            history: vec![stats],
            total_episodes: episodes,
            unchanged_for: 0,
        })
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    /// Offspring created by the most recent step.
    pub fn offspring(&self) -> &[Individual] {
        &self.offspring
    }

    pub fn history(&self) -> &[GenerationStats] {
        &self.history
    }

    pub fn total_episodes(&self) -> u64 {
        self.total_episodes
    }

    pub fn is_done(&self) -> bool {
        self.generation >= self.params.generations
            || self.params.early_stop_window.is_some_and(|w| w > 0 && self.unchanged_for >= w)
    }

    pub fn step(&mut self) -> Result<&GenerationStats, GpError> {
        let generation = self.generation + 1;
        let outcome = evolve_generation(
            &self.population,
            self.vocab,
            self.evaluator,
            &self.params,
            generation,
            self.total_episodes,
            &mut self.rng,
        )?;
        let previous_best = self.history.last().map(|s| s.best_fitness);
        if previous_best == Some(outcome.stats.best_fitness) {
            self.unchanged_for += 1;
        } else {
            self.unchanged_for = 0;
        }
        self.population = outcome.population;
        self.offspring = outcome.offspring;
        self.generation = generation;
        self.total_episodes = outcome.stats.total_episodes;
        self.history.push(outcome.stats);
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self) -> Result<(), GpError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Optionally re-scores the final population, then picks the best.
    pub fn finish(mut self) -> Result<RunOutcome, GpError> {
        if self.params.final_validation_episodes > 0 {
            self.total_episodes += evaluate_batch(
                &mut self.population,
                self.evaluator,
                &self.params,
                self.params.final_validation_episodes,
                self.generation,
                Purpose::Validation,
            )?;
        }
        let best = self
            .population
            .iter()
            .max_by(|a, b| a.score().total_cmp(&b.score()))
            .cloned()
            .expect("population is never empty");
        Ok(RunOutcome { history: self.history, best, population: self.population, total_episodes: self.total_episodes })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            generation: self.generation,
            population: self
                .population
                .iter()
                .map(|ind| SavedIndividual {
                    genotype: ind.genotype.to_text(self.vocab),
                    fitness: ind.fitness,
                    evaluations: ind.evaluations,
                    birth_generation: ind.birth_generation,
                })
                .collect(),
            rng: self.rng.clone(),
            history: self.history.clone(),
            total_episodes: self.total_episodes,
            unchanged_for: self.unchanged_for,
        }
    }

    /// Continues a run from a checkpoint. `params` may only differ from the
    /// checkpointed ones in the generation count.
    pub fn resume(checkpoint: Checkpoint, params: GpParams, vocab: &'a Vocabulary, evaluator: &'a E) -> Result<Self, GpError> {
        params.validate()?;
        let comparable = GpParams { generations: checkpoint.params.generations, ..params.clone() };
        if comparable != checkpoint.params {
            return Err(GpError::Checkpoint("parameters differ from the checkpointed run".into()));
        }
        let population = checkpoint
            .population
            .into_iter()
            .map(|saved| {
                Ok(Individual {
                    genotype: Genotype::parse_text(&saved.genotype, vocab)?,
                    fitness: saved.fitness,
                    evaluations: saved.evaluations,
                    birth_generation: saved.birth_generation,
                })
            })
            .collect::<Result<Vec<_>, BtError>>()?;
        if population.len() != params.population {
            return Err(GpError::Checkpoint("population size differs".into()));
        }
        Ok(Self {
            params,
            vocab,
            evaluator,
            rng: checkpoint.rng,
            population,
            offspring: Vec::new(),
            generation: checkpoint.generation,
            history: checkpoint.history,
            total_episodes: checkpoint.total_episodes,
            unchanged_for: checkpoint.unchanged_for,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedIndividual {
    pub genotype: String,
    pub fitness: Option<FitnessValue>,
    pub evaluations: u32,
    pub birth_generation: usize,
}

/// Everything needed to resume a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: GpParams,
    pub generation: usize,
    pub population: Vec<SavedIndividual>,
    pub rng: ChaCha8Rng,
    pub history: Vec<GenerationStats>,
    pub total_episodes: u64,
    pub unchanged_for: usize,
}

/// Evolves a population for a scenario from scratch.
pub fn run(params: &GpParams, scenario: &Scenario, weights: &FitnessWeights) -> Result<RunOutcome, GpError> {
    let evaluator = EpisodeEvaluator::new(scenario, *weights);
    let mut evolution = Evolution::new(params.clone(), scenario.vocab(), &evaluator)?;
    evolution.run_to_end()?;
    evolution.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt::{LeafKind, Token};
    use crate::sim::{PoolKind, Scenario};

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::new();
        for name in ["a", "b", "c", "d"] {
            v.push(name, LeafKind::Action).unwrap();
        }
        v.push("k", LeafKind::Condition).unwrap();
        v
    }

    fn g(text: &str, v: &Vocabulary) -> Genotype {
        Genotype::parse_text(text, v).unwrap()
    }

    #[test]
    fn table_one_slot_counts() {
        let p = GpParams::default();
        assert_eq!((p.crossover_parents(), p.mutation_parents(), p.elites()), (12, 18, 3));
        p.validate().unwrap();
        assert!(GpParams { p_node_addition: 0.5, ..p.clone() }.validate().is_err());
        assert!(GpParams { elitism_fraction: 1.5, ..p }.validate().is_err());
    }

    #[test]
    fn root_swap_exchanges_parents() {
        let v = vocab();
        let (x, y) = (g("s( a b )", &v), g("f( k c )", &v));
        let (p, q) = swap_subtrees(&x, 0..x.len(), &y, 0..y.len());
        assert_eq!((p, q), (y, x));
    }

    #[test]
    fn leaf_swap_splices_tokens() {
        let v = vocab();
        let (x, y) = (g("s( a b )", &v), g("c", &v));
        let (p, q) = swap_subtrees(&x, 2..3, &y, 0..1);
        assert_eq!(p.to_text(&v), "s( a c )");
        assert_eq!(q.to_text(&v), "b");
    }

    #[test]
    fn inner_subtree_swap() {
        let v = vocab();
        let x = g("s( f( k a ) b )", &v);
        let y = g("f( s( c d ) a )", &v);
        let (p, q) = swap_subtrees(&x, 1..5, &y, 1..5);
        assert_eq!(p.to_text(&v), "s( s( c d ) b )");
        assert_eq!(q.to_text(&v), "f( f( k a ) a )");
    }

    #[test]
    fn crossover_offspring_are_valid_and_distinct() {
        let v = vocab();
        let mut rng = stream_rng(1, 0);
        let (x, y) = (g("s( f( k a ) b c )", &v), g("f( s( c d ) a )", &v));
        for _ in 0..500 {
            let (p, q) = crossover(&x, &y, &v, 64, &mut rng);
            assert!(is_valid(&p, &v).unwrap() && is_valid(&q, &v).unwrap());
            assert_ne!(p, q);
        }
    }

    #[test]
    fn crossover_gives_up_with_parents() {
        let v = vocab();
        let mut rng = stream_rng(1, 0);
        let (x, y) = (g("a", &v), g("a", &v));
        assert_eq!(crossover(&x, &y, &v, 64, &mut rng), (x.clone(), y));
    }

    #[test]
    fn addition_inserts_before_position() {
        let v = vocab();
        let c = v.lookup("c").unwrap();
        let out = insert_node(&g("s( a b )", &v), 2, PoolNode::Leaf(c), c, ControlKind::Sequence).unwrap();
        assert_eq!(out.to_text(&v), "s( a c b )");
        let wrapped = insert_node(&g("a", &v), 1, PoolNode::Leaf(c), c, ControlKind::Fallback).unwrap();
        assert_eq!(wrapped.to_text(&v), "f( a c )");
        let control =
            insert_node(&g("s( a b )", &v), 3, PoolNode::Control(ControlKind::Fallback), c, ControlKind::Sequence)
                .unwrap();
        assert_eq!(control.to_text(&v), "s( a b f( c ) )");
    }

    #[test]
    fn node_mutation_switches_kind() {
        let v = vocab();
        let out = replace_node(&g("s( a b )", &v), 0, PoolNode::Control(ControlKind::Fallback)).unwrap();
        assert_eq!(out.to_text(&v), "f( a b )");
        let d = v.lookup("d").unwrap();
        let leaf = replace_node(&g("s( a f( k b ) )", &v), 2, PoolNode::Leaf(d)).unwrap();
        assert_eq!(leaf.to_text(&v), "s( a d )");
        assert!(matches!(replace_node(&g("s( a b )", &v), 3, PoolNode::Leaf(d)), Err(BtError::NotANode(3))));
    }

    #[test]
    fn deletion_drops_subtree_but_not_root() {
        let v = vocab();
        let out = delete_node(&g("s( a f( k b ) c )", &v), 2).unwrap();
        assert_eq!(out.to_text(&v), "s( a c )");
        assert!(delete_node(&g("s( a b )", &v), 0).is_err());
    }

    #[test]
    fn single_leaf_never_draws_deletion() {
        let p = GpParams { p_node_mutation: 0.0, p_node_addition: 0.5, p_node_deletion: 0.5, ..Default::default() };
        let mut rng = stream_rng(3, 0);
        for _ in 0..1000 {
            assert_eq!(draw_op(&p, true, &mut rng), MutationOp::Insert);
        }
    }

    #[test]
    fn mutation_yields_valid_changed_children() {
        let v = vocab();
        let p = GpParams::default();
        let mut rng = stream_rng(5, 0);
        let mut current = g("a", &v);
        for _ in 0..2000 {
            let child = mutate(&current, &v, &p, &mut rng);
            assert!(is_valid(&child, &v).unwrap());
            assert!(child.node_count() <= p.node_cap);
            assert_ne!(child, current);
            current = child;
        }
    }

    #[test]
    fn two_candidates_one_slot() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(tournament_indices(&[1.0, 2.0], 1, &mut rng).unwrap(), vec![1]);
        assert!(matches!(
            tournament_indices(&[1.0], 2, &mut rng),
            Err(GpError::SlotsExceedCandidates { slots: 2, candidates: 1 })
        ));
    }

    #[test]
    fn best_survives_worst_does_not() {
        let mut rng = stream_rng(9, 0);
        for trial in 0..10_000u64 {
            let scores: Vec<f64> = (0..90).map(|i| ((i as u64 * 7919 + trial * 104729) % 1000) as f64).collect();
            let best = (0..90).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            let worst = (0..90).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            let out = tournament_indices(&scores, 27, &mut rng).unwrap();
            assert_eq!(out.len(), 27);
            assert!(out.contains(&best) && !out.contains(&worst));
            let mut sorted = out.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 27);
        }
    }

    #[test]
    fn equal_scores_give_random_subsets() {
        let scores = vec![0.0; 10];
        let mut seen = std::collections::HashSet::new();
        let mut rng = stream_rng(2, 0);
        for _ in 0..200 {
            let mut out = tournament_indices(&scores, 3, &mut rng).unwrap();
            out.sort_unstable();
            seen.insert(out);
        }
        assert!(seen.len() > 20);
        let a = tournament_indices(&scores, 3, &mut stream_rng(2, 7)).unwrap();
        let b = tournament_indices(&scores, 3, &mut stream_rng(2, 7)).unwrap();
        assert_eq!(a, b);
    }

    fn det_params(generations: usize, seed: u64) -> GpParams {
        GpParams { generations, seed, parallel: false, ..Default::default() }
    }

    #[test]
    fn generation_accounting() {
        let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
        let evaluator = EpisodeEvaluator::new(&scenario, FitnessWeights::TABLE2);
        let mut evo = Evolution::new(det_params(5, 4), scenario.vocab(), &evaluator).unwrap();
        assert_eq!(evo.history()[0].episodes, 30);
        for _ in 0..5 {
            let stats = evo.step().unwrap().clone();
            assert_eq!(stats.episodes, 60);
            assert!(stats.best_fitness >= stats.mean_fitness);
            assert_eq!(evo.offspring().len(), 60);
            assert_eq!(evo.population().len(), 30);
            for ind in evo.population() {
                assert!(is_valid(&ind.genotype, scenario.vocab()).unwrap());
                assert_eq!(ind.genotype.len(), ind.genotype.tokens().len());
            }
        }
        assert!(evo.is_done());
        assert_eq!(evo.total_episodes(), 30 + 5 * 60);
    }

    #[test]
    fn zero_generations_is_initial_population() {
        let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
        let out = run(&det_params(0, 3), &scenario, &FitnessWeights::TABLE2).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best.score(), out.history[0].best_fitness);
        assert!(out.population.iter().all(|i| i.genotype.node_count() <= 4));
    }

    #[test]
    fn deterministic_best_never_drops() {
        let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
        let out = run(&det_params(150, 11), &scenario, &FitnessWeights::TABLE2).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let scenario = Scenario::builtin("stoch3", PoolKind::Core9).unwrap();
        let w = FitnessWeights::TABLE2;
        let serial = run(&GpParams { parallel: false, ..det_params(30, 8) }, &scenario, &w).unwrap();
        let parallel = run(&GpParams { parallel: true, ..det_params(30, 8) }, &scenario, &w).unwrap();
        assert_eq!(serial.history, parallel.history);
    }

    #[test]
    fn checkpoint_resume_is_seamless() {
        let scenario = Scenario::builtin("stoch2", PoolKind::Core9).unwrap();
        let evaluator = EpisodeEvaluator::new(&scenario, FitnessWeights::TABLE2);
        let params = GpParams { reevaluate_elites: true, ..det_params(40, 21) };
        let mut straight = Evolution::new(params.clone(), scenario.vocab(), &evaluator).unwrap();
        straight.run_to_end().unwrap();

        let mut first = Evolution::new(GpParams { generations: 15, ..params.clone() }, scenario.vocab(), &evaluator).unwrap();
        first.run_to_end().unwrap();
        let json = serde_json::to_string(&first.checkpoint()).unwrap();
        let saved: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(saved, first.checkpoint());
        let mut resumed = Evolution::resume(saved.clone(), params.clone(), scenario.vocab(), &evaluator).unwrap();
        resumed.run_to_end().unwrap();
        assert_eq!(resumed.history(), straight.history());

        let other = GpParams { population: 20, ..params };
        assert!(matches!(Evolution::resume(saved, other, scenario.vocab(), &evaluator), Err(GpError::Checkpoint(_))));
    }

    #[test]
    fn early_stop_window() {
        let scenario = Scenario::builtin("det", PoolKind::Core9).unwrap();
        let params = GpParams { early_stop_window: Some(3), ..det_params(10_000, 2) };
        let out = run(&params, &scenario, &FitnessWeights::TABLE2).unwrap();
        assert!(out.history.len() < 10_001);
        let tail = &out.history[out.history.len() - 4..];
        assert!(tail.iter().all(|s| s.best_fitness == tail[0].best_fitness));
    }

    #[test]
    fn splice_keeps_token_stream_well_formed() {
        let v = vocab();
        let x = g("s( a f( k b ) c )", &v);
        for at in x.node_positions() {
            let span = x.subtree_span(at).unwrap();
            let (p, _) = swap_subtrees(&x, span, &g("d", &v), 0..1);
            Genotype::from_tokens(p.into_tokens()).unwrap();
        }
        assert!(matches!(x.tokens()[0], Token::Open(ControlKind::Sequence)));
    }
}
