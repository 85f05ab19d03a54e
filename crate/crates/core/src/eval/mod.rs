//! Goal-achievement evaluation against environment ground truth.
//!
//! This is the only module that reads [`GridWorld::controllable_state`]; the
//! learner and actors see observations alone.

mod goalset;
mod presets;
mod report;

pub use goalset::{GoalEntry, GoalSet, GOALSET_MAGIC, GOALSET_VERSION};
pub use presets::{apply_preset, preset_overrides, PRESETS};
pub use report::{
    emit_report, heat_strip_svg, learning_curve_svg, metrics_header, parse_metrics_csv, write_metrics_csv,
    MetricsRow,
};

use crate::env::{EnvError, GridWorld, GridWorldConfig, Observation};
use crate::math::Tensor;
use crate::nets::{obs_matrix, Inference, NetConfig, NetError, ParamSet};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("goal set file: {0}")]
    Format(String),
    #[error("unknown preset `{name}`; available: {}", PRESETS.join(", "))]
    UnknownPreset { name: String },
    #[error("report needs at least one row")]
    EmptyReport,
    #[error("metrics file: {0}")]
    Metrics(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of each dimension's extent within which a goal counts as reached.
pub const TOLERANCE: f64 = 0.1;

/// Per-dimension test `|x_d − g_d| ≤ 0.1 · range_d`.
pub fn dimension_achieved(x: f64, goal: f64, range: f64) -> bool {
    (x - goal).abs() <= TOLERANCE * range
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoalOutcome {
    pub overall: u64,
    pub dims: Vec<u64>,
}

/// Exact counts of achieved trials; fractions are formed only on request.
#[derive(Clone, Debug, PartialEq)]
pub struct AchievementReport {
    pub frames: u64,
    pub trials_per_goal: usize,
    pub per_goal: Vec<GoalOutcome>,
}

impl AchievementReport {
    pub fn total(&self) -> u64 {
        (self.per_goal.len() * self.trials_per_goal) as u64
    }

    pub fn achieved_overall(&self) -> u64 {
        self.per_goal.iter().map(|g| g.overall).sum()
    }

    pub fn achieved_dim(&self, d: usize) -> u64 {
        self.per_goal.iter().map(|g| g.dims[d]).sum()
    }

    pub fn dims(&self) -> usize {
        self.per_goal.first().map_or(0, |g| g.dims.len())
    }

    pub fn overall(&self) -> f64 {
        self.achieved_overall() as f64 / self.total() as f64
    }

    pub fn dim(&self, d: usize) -> f64 {
        self.achieved_dim(d) as f64 / self.total() as f64
    }

    pub fn dim_fractions(&self) -> Vec<f64> {
        (0..self.dims()).map(|d| self.dim(d)).collect()
    }
}

/// A goal-conditioned controller driven over many environments in lockstep.
pub trait GoalPolicy {
    /// Starts a batch of episodes; row `i` pursues `goals[i]`.
    fn begin(&mut self, goals: &[&Observation], horizon: usize) -> Result<(), EvalError>;

    /// Actions for step `t` (1-based) of every row.
    fn act(&mut self, t: usize, envs: &[GridWorld], obs: &[Observation]) -> Result<Vec<usize>, EvalError>;
}

/// Greedy (ε = 0) policy of a parameter snapshot.
pub struct GreedyPolicy<'a> {
    inference: Inference<'a>,
    horizon: usize,
    goal_feats: Tensor,
    recurrent: Tensor,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a ParamSet) -> Self {
        Self {
            inference: Inference::new(cfg, params),
            horizon: 0,
            goal_feats: Tensor::zeros(&[0, 0]),
            recurrent: Tensor::zeros(&[0, 0]),
        }
    }
}

impl GoalPolicy for GreedyPolicy<'_> {
    fn begin(&mut self, goals: &[&Observation], horizon: usize) -> Result<(), EvalError> {
        self.horizon = horizon;
        self.goal_feats = self.inference.encode(obs_matrix(goals.iter().copied()))?;
        self.recurrent = self.inference.initial_state(goals.len());
        Ok(())
    }

    fn act(&mut self, t: usize, _envs: &[GridWorld], obs: &[Observation]) -> Result<Vec<usize>, EvalError> {
        let hs = self.inference.encode(obs_matrix(obs))?;
        let state = std::mem::replace(&mut self.recurrent, Tensor::zeros(&[0, 0]));
        let (q, next) = self
            .inference
            .q_values(hs, self.goal_feats.clone(), t, self.horizon, state)?;
        self.recurrent = next;
        Ok((0..q.rows()).map(|r| crate::agent::greedy(q.row_slice(r))).collect())
    }
}

/// Always the no-op action.
pub struct NoOpPolicy;

impl GoalPolicy for NoOpPolicy {
    fn begin(&mut self, _goals: &[&Observation], _horizon: usize) -> Result<(), EvalError> {
        Ok(())
    }

    fn act(&mut self, _t: usize, envs: &[GridWorld], _obs: &[Observation]) -> Result<Vec<usize>, EvalError> {
        Ok(vec![crate::env::Action::NoOp as usize; envs.len()])
    }
}

/// Seed of the environment used for trial `trial` of goal `goal`.
pub fn trial_seed(seed: u64, goal: usize, trial: usize) -> u64 {
    rng::derive_seed(seed, "eval-trial", (goal as u64) << 32 | trial as u64)
}

/// Runs every (goal, trial) pair for `horizon` steps from a fresh reset and
/// scores the final avatar position against the goal's ground truth.
pub fn evaluate(
    policy: &mut dyn GoalPolicy,
    env_cfg: &GridWorldConfig,
    goals: &GoalSet,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<AchievementReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let mut envs = Vec::with_capacity(goals.len() * trials);
    let mut obs = Vec::with_capacity(goals.len() * trials);
    let mut row_goals = Vec::with_capacity(goals.len() * trials);
    for (gi, entry) in goals.entries().iter().enumerate() {
        for trial in 0..trials {
            let (env, o) = GridWorld::reset(env_cfg, trial_seed(seed, gi, trial))?;
            envs.push(env);
            obs.push(o);
            row_goals.push(&entry.observation);
        }
    }
    policy.begin(&row_goals, horizon)?;
    for t in 1..=horizon {
        let actions = policy.act(t, &envs, &obs)?;
        for ((env, o), a) in envs.iter_mut().zip(obs.iter_mut()).zip(actions) {
            *o = env.step(a)?;
        }
    }
    let ranges = env_cfg.controllable_ranges();
    let per_goal = goals
        .entries()
        .iter()
        .enumerate()
        .map(|(gi, entry)| {
            let mut out = GoalOutcome {
                overall: 0,
                dims: vec![0; ranges.len()],
            };
            for env in &envs[gi * trials..(gi + 1) * trials] {
                let x = env.controllable_state();
                let hits: Vec<bool> = (0..ranges.len())
                    .map(|d| dimension_achieved(x[d], entry.truth[d], ranges[d]))
                    .collect();
                for (d, &h) in hits.iter().enumerate() {
                    out.dims[d] += u64::from(h);
                }
                out.overall += u64::from(hits.iter().all(|&h| h));
            }
            out
        })
        .collect();
    Ok(AchievementReport {
        frames: 0,
        trials_per_goal: trials,
        per_goal,
    })
}
