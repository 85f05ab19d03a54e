//! Actor/learner orchestration, configuration and checkpoints.
//!
//! Actors play goal episodes against a shared goal buffer and send finished
//! trajectories to a single learner, which batches them, updates the policy
//! and the reward embedding, and periodically publishes an immutable
//! parameter snapshot that actors pick up between episodes.
//!
//! Two schedules drive the same [`Actor`] and [`Learner`] types:
//!
//! * **threaded**: one thread per actor, a learner thread and an evaluation
//!   thread, connected by a bounded queue (blocking when full) and an
//!   atomically swapped snapshot reference.
//! * **lockstep**: actors and learner interleaved round-robin on the calling
//!   thread. Every run with the same seed and config is bit-reproducible,
//!   including runs resumed from a checkpoint.

mod actor;
mod checkpoint;
mod config;
mod learner;
mod state;
mod train;

use std::sync::Arc;

pub use actor::Actor;
pub use checkpoint::{Checkpoint, CheckpointError, Entry, MAGIC, VERSION};
pub use config::{ConfigError, ExperimentConfig, Schedule, KEYS};
pub use learner::{Learner, SequenceAudit, Window};
pub use state::{load_goal_buffer, load_params, save_params, LEARNER_PARAMS};
pub use train::{train, TrainOptions, TrainSummary};

use crate::agent::{AgentError, GoalEpisode};
use crate::env::EnvError;
use crate::eval::EvalError;
use crate::goalbuf::GoalBufferError;
use crate::nets::{NetError, ParamSet};
use crate::reward::RewardError;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    GoalBuffer(#[from] GoalBufferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("a worker thread panicked or poisoned a lock")]
    Poisoned,
}

/// Immutable, versioned copy of the learner's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub version: u64,
    pub params: ParamSet,
}

/// Message from an actor to the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub actor: usize,
    /// Per-actor sequence number, starting at 0.
    pub seq: u64,
    /// Drawn from the actor's replay buffer rather than freshly played.
    pub replay: bool,
    /// Reward the provider assigned to the episode's own goal, before any relabelling.
    pub provider_reward: f64,
    pub episode: Arc<GoalEpisode>,
}
