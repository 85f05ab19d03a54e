//! Experiment configuration: flat `key = value` text with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::agent::HindsightConfig;
use crate::env::{DistractorMotion, GridWorldConfig};
use crate::goalbuf::{GoalBufferConfig, Strategy};
use crate::math::RmsPropConfig;
use crate::nets::NetConfig;
use crate::reward::{RewardKind, RewardModel};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Lockstep when there is a single actor, threads otherwise.
    Auto,
    /// Actors and learner interleaved deterministically on one thread.
    Lockstep,
    Threaded,
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "lockstep" => Ok(Self::Lockstep),
            "threaded" => Ok(Self::Threaded),
            other => Err(format!("unknown schedule `{other}`")),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Lockstep => "lockstep",
            Self::Threaded => "threaded",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: GridWorldConfig,
    pub reward: RewardKind,
    pub sigma_pixel: f64,
    pub goal_buffer: GoalBufferConfig,
    pub episode_length: usize,
    pub decoys: usize,
    /// `None` means `decoys + 1`.
    pub beta: Option<f64>,
    pub hindsight: HindsightConfig,
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub actors: usize,
    pub epsilon_base: f64,
    pub epsilon_alpha: f64,
    pub total_frames: u64,
    pub eval_every: u64,
    pub eval_goals: usize,
    pub eval_trials: usize,
    pub seed: u64,
    pub replay_capacity: usize,
    /// Replayed episodes emitted per fresh episode.
    pub replay_ratio: usize,
    pub broadcast_every: u64,
    pub poll_every: u64,
    pub queue_capacity: usize,
    pub encoder_hidden: usize,
    pub features: usize,
    pub time_hidden: usize,
    pub recurrent: usize,
    pub embedding: usize,
    pub schedule: Schedule,
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: GridWorldConfig::default(),
            reward: RewardKind::Discern,
            sigma_pixel: 4.0,
            goal_buffer: GoalBufferConfig::default(),
            episode_length: 50,
            decoys: 4,
            beta: None,
            hindsight: HindsightConfig::default(),
            gamma: 0.98,
            lambda: 0.9,
            batch_size: 32,
            learning_rate: 1e-4,
            actors: 8,
            epsilon_base: 0.4,
            epsilon_alpha: 7.0,
            total_frames: 2_000_000,
            eval_every: 200_000,
            eval_goals: 100,
            eval_trials: 20,
            seed: 0,
            replay_capacity: 256,
            replay_ratio: 1,
            broadcast_every: 10,
            poll_every: 2,
            queue_capacity: 64,
            encoder_hidden: 128,
            features: 64,
            time_hidden: 16,
            recurrent: 128,
            embedding: 32,
            schedule: Schedule::Auto,
            wall_clock: true,
        }
    }
}

/// Keys that do not influence the training trajectory and are left out of the hash.
const UNHASHED: [&str; 2] = ["total_frames", "wall_clock"];

pub const KEYS: [&str; 41] = [
    "env.width",
    "env.height",
    "env.distractors",
    "env.distractor_motion",
    "env.distractor_size",
    "reward",
    "sigma_pixel",
    "goal_buffer.capacity",
    "goal_buffer.strategy",
    "goal_buffer.p_replace",
    "goal_buffer.p_add_non_diverse",
    "goal_buffer.warmup",
    "episode_length",
    "decoys",
    "beta",
    "p_her",
    "her_window",
    "gamma",
    "lambda",
    "batch_size",
    "learning_rate",
    "actors",
    "epsilon.base",
    "epsilon.alpha",
    "total_frames",
    "eval_every",
    "eval_goals",
    "eval_trials",
    "seed",
    "replay_capacity",
    "replay_ratio",
    "broadcast_every",
    "poll_every",
    "queue_capacity",
    "net.encoder_hidden",
    "net.features",
    "net.time_hidden",
    "net.recurrent",
    "net.embedding",
    "schedule",
    "wall_clock",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines over the current values without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.into(),
                });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "env.width" => self.env.width = parse(key, value)?,
            "env.height" => self.env.height = parse(key, value)?,
            "env.distractors" => self.env.n_distractors = parse(key, value)?,
            "env.distractor_motion" => self.env.distractor_motion = parse::<DistractorMotion>(key, value)?,
            "env.distractor_size" => self.env.distractor_size = parse(key, value)?,
            "reward" => self.reward = parse(key, value)?,
            "sigma_pixel" => self.sigma_pixel = parse(key, value)?,
            "goal_buffer.capacity" => self.goal_buffer.capacity = parse(key, value)?,
            "goal_buffer.strategy" => self.goal_buffer.strategy = parse::<Strategy>(key, value)?,
            "goal_buffer.p_replace" => self.goal_buffer.p_replace = parse(key, value)?,
            "goal_buffer.p_add_non_diverse" => self.goal_buffer.p_add_non_diverse = parse(key, value)?,
            "goal_buffer.warmup" => self.goal_buffer.warmup = parse(key, value)?,
            "episode_length" => self.episode_length = parse(key, value)?,
            "decoys" => self.decoys = parse(key, value)?,
            "beta" => self.beta = Some(parse(key, value)?),
            "p_her" => self.hindsight.p_her = parse(key, value)?,
            "her_window" => self.hindsight.window = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "actors" => self.actors = parse(key, value)?,
            "epsilon.base" => self.epsilon_base = parse(key, value)?,
            "epsilon.alpha" => self.epsilon_alpha = parse(key, value)?,
            "total_frames" => self.total_frames = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_goals" => self.eval_goals = parse(key, value)?,
            "eval_trials" => self.eval_trials = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "replay_capacity" => self.replay_capacity = parse(key, value)?,
            "replay_ratio" => self.replay_ratio = parse(key, value)?,
            "broadcast_every" => self.broadcast_every = parse(key, value)?,
            "poll_every" => self.poll_every = parse(key, value)?,
            "queue_capacity" => self.queue_capacity = parse(key, value)?,
            "net.encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "net.features" => self.features = parse(key, value)?,
            "net.time_hidden" => self.time_hidden = parse(key, value)?,
            "net.recurrent" => self.recurrent = parse(key, value)?,
            "net.embedding" => self.embedding = parse(key, value)?,
            "schedule" => self.schedule = parse(key, value)?,
            "wall_clock" => self.wall_clock = parse(key, value)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: other.into(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "env.width" => self.env.width.to_string(),
            "env.height" => self.env.height.to_string(),
            "env.distractors" => self.env.n_distractors.to_string(),
            "env.distractor_motion" => self.env.distractor_motion.to_string(),
            "env.distractor_size" => self.env.distractor_size.to_string(),
            "reward" => self.reward.to_string(),
            "sigma_pixel" => format!("{:?}", self.sigma_pixel),
            "goal_buffer.capacity" => self.goal_buffer.capacity.to_string(),
            "goal_buffer.strategy" => self.goal_buffer.strategy.to_string(),
            "goal_buffer.p_replace" => format!("{:?}", self.goal_buffer.p_replace),
            "goal_buffer.p_add_non_diverse" => format!("{:?}", self.goal_buffer.p_add_non_diverse),
            "goal_buffer.warmup" => self.goal_buffer.warmup.to_string(),
            "episode_length" => self.episode_length.to_string(),
            "decoys" => self.decoys.to_string(),
            "beta" => format!("{:?}", self.beta()),
            "p_her" => format!("{:?}", self.hindsight.p_her),
            "her_window" => self.hindsight.window.to_string(),
            "gamma" => format!("{:?}", self.gamma),
            "lambda" => format!("{:?}", self.lambda),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "actors" => self.actors.to_string(),
            "epsilon.base" => format!("{:?}", self.epsilon_base),
            "epsilon.alpha" => format!("{:?}", self.epsilon_alpha),
            "total_frames" => self.total_frames.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_goals" => self.eval_goals.to_string(),
            "eval_trials" => self.eval_trials.to_string(),
            "seed" => self.seed.to_string(),
            "replay_capacity" => self.replay_capacity.to_string(),
            "replay_ratio" => self.replay_ratio.to_string(),
            "broadcast_every" => self.broadcast_every.to_string(),
            "poll_every" => self.poll_every.to_string(),
            "queue_capacity" => self.queue_capacity.to_string(),
            "net.encoder_hidden" => self.encoder_hidden.to_string(),
            "net.features" => self.features.to_string(),
            "net.time_hidden" => self.time_hidden.to_string(),
            "net.recurrent" => self.recurrent.to_string(),
            "net.embedding" => self.embedding.to_string(),
            "schedule" => self.schedule.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Hash of every setting that affects training.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| !UNHASHED.contains(k)) {
            h.update(key.as_bytes());
            h.update(b"=");
            h.update(self.get(key).as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or((self.decoys + 1) as f64)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hindsight
            .validate(self.episode_length + 1)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, p) in [
            ("goal_buffer.p_replace", self.goal_buffer.p_replace),
            ("goal_buffer.p_add_non_diverse", self.goal_buffer.p_add_non_diverse),
            ("epsilon.base", self.epsilon_base),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.gamma >= 1.0 {
            return bad("gamma must be below 1".into());
        }
        if self.actors == 0 {
            return bad("actors must be at least 1".into());
        }
        if self.episode_length == 0 || self.batch_size == 0 || self.decoys == 0 {
            return bad("episode_length, batch_size and decoys must be positive".into());
        }
        if self.goal_buffer.capacity == 0 || self.goal_buffer.warmup > self.goal_buffer.capacity {
            return bad("goal buffer warm-up exceeds capacity".into());
        }
        if self.eval_goals == 0 || self.eval_trials == 0 || self.eval_every == 0 {
            return bad("evaluation cadence, goals and trials must be positive".into());
        }
        if self.broadcast_every == 0 || self.poll_every == 0 || self.queue_capacity == 0 {
            return bad("broadcast_every, poll_every and queue_capacity must be positive".into());
        }
        if !(self.sigma_pixel > 0.0) || !(self.learning_rate > 0.0) {
            return bad("sigma_pixel and learning_rate must be positive".into());
        }
        if self.epsilon_alpha < 0.0 {
            return bad("epsilon.alpha must be non-negative".into());
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return bad(format!("beta = {b} must be positive"));
            }
            if b != (self.decoys + 1) as f64 {
                log::warn!("beta = {b} overrides the decoys + 1 default");
            }
        }
        Ok(())
    }

    /// `ε_i = base^(1 + α·i/(N−1))`; a single actor uses `base`.
    pub fn actor_epsilon(&self, i: usize) -> f64 {
        if self.actors <= 1 {
            return self.epsilon_base;
        }
        let frac = i as f64 / (self.actors - 1) as f64;
        self.epsilon_base.powf(1.0 + self.epsilon_alpha * frac)
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            obs_len: self.env.obs_len(),
            encoder_hidden: self.encoder_hidden,
            features: self.features,
            time_hidden: self.time_hidden,
            recurrent: self.recurrent,
            embedding: self.embedding,
            actions: crate::env::N_ACTIONS,
        }
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            ..RmsPropConfig::default()
        }
    }

    pub fn reward_model(&self) -> RewardModel {
        RewardModel {
            kind: self.reward,
            sigma_pixel: self.sigma_pixel,
        }
    }

    pub fn resolved_schedule(&self) -> Schedule {
        match self.schedule {
            Schedule::Auto if self.actors == 1 => Schedule::Lockstep,
            Schedule::Auto => Schedule::Threaded,
            s => s,
        }
    }
}
