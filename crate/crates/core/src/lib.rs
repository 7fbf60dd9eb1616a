//! Evolving behavior trees for a mobile pick-and-place task.
//!
//! - [`bt`]: genotypes, parsing, validity and ticking.
//! - [`sim`]: the abstract world, failure profiles and behavior pools.
//! - [`fitness`]: episode cost and fitness.
//! - [`gp`]: the genetic programming loop.
//! - [`experiment`]: multi-seed experiments, CSV output and replay.

pub mod bt;
pub mod config;
pub mod experiment;
pub mod fitness;
pub mod gp;
pub mod sim;

pub use bt::{BehaviorTree, Genotype, Vocabulary};
pub use fitness::{FitnessValue, FitnessWeights};
pub use gp::{Evolution, GpParams, RunOutcome};
pub use sim::{PoolKind, Profile, Scenario};
