use std::sync::{Arc, Mutex};

use rand::Rng as _;

use super::{ParamSnapshot, RuntimeError, Trajectory};
use crate::agent::{apply_relabel, epsilon_greedy, hindsight_goal, GoalEpisode, HindsightConfig, ReplayBuffer};
use crate::env::{GridWorld, Observation, N_ACTIONS};
use crate::goalbuf::GoalBuffer;
use crate::nets::{obs_matrix, Inference, NetConfig};
use crate::reward::RewardModel;
use crate::rng::{self, Rng};
use crate::runtime::ExperimentConfig;

/// One experience generator: its own environment, which is never reset,
/// replay buffer and parameter snapshot.
pub struct Actor {
    pub(crate) id: usize,
    pub(crate) epsilon: f64,
    horizon: usize,
    hindsight: HindsightConfig,
    reward: RewardModel,
    replay_ratio: usize,
    poll_every: u64,
    net: NetConfig,
    pub(crate) env: GridWorld,
    obs: Observation,
    pub(crate) replay: ReplayBuffer,
    pub(crate) rng: Rng,
    pub(crate) seq: u64,
    pub(crate) episodes: u64,
    pub(crate) since_poll: u64,
    pub(crate) steps: u64,
    pub(crate) snapshot: Arc<ParamSnapshot>,
}

impl Actor {
    pub fn new(cfg: &ExperimentConfig, id: usize, snapshot: Arc<ParamSnapshot>) -> Result<Self, RuntimeError> {
        let (env, obs) = GridWorld::reset(&cfg.env, rng::derive_seed(cfg.seed, "env", id as u64))?;
        Ok(Self {
            id,
            epsilon: cfg.actor_epsilon(id),
            horizon: cfg.episode_length,
            hindsight: cfg.hindsight,
            reward: cfg.reward_model(),
            replay_ratio: cfg.replay_ratio,
            poll_every: cfg.poll_every,
            net: cfg.net(),
            env,
            obs,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            rng: rng::stream(cfg.seed, "actor", id as u64),
            seq: 0,
            episodes: 0,
            since_poll: 0,
            steps: 0,
            snapshot,
        })
    }

    pub(crate) fn restore_observation(&mut self) {
        self.obs = self.env.render();
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Environment steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env.steps()
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot.version
    }

    pub fn wants_poll(&self) -> bool {
        self.since_poll >= self.poll_every
    }

    pub fn set_snapshot(&mut self, snapshot: Arc<ParamSnapshot>) {
        debug_assert!(snapshot.version >= self.snapshot.version);
        self.snapshot = snapshot;
        self.since_poll = 0;
    }

    fn step(&mut self, action: usize) -> Result<(), RuntimeError> {
        self.obs = self.env.step(action)?;
        self.steps += 1;
        Ok(())
    }

    /// Runs `T` steps. While the goal buffer is cold the steps are random and
    /// only feed the buffer; afterwards one goal episode is played and the
    /// fresh trajectory is emitted followed by `replay_ratio` replayed ones.
    pub fn run(&mut self, goals: &Mutex<GoalBuffer>) -> Result<Vec<Trajectory>, RuntimeError> {
        let goal = {
            let buf = goals.lock().map_err(|_| RuntimeError::Poisoned)?;
            if buf.is_warm() {
                Some(buf.sample_goal_with(&mut self.rng)?)
            } else {
                None
            }
        };
        let Some(goal) = goal else {
            let mut visited = Vec::with_capacity(self.horizon);
            for _ in 0..self.horizon {
                let a = self.rng.random_range(0..N_ACTIONS);
                self.step(a)?;
                visited.push(self.obs.clone());
            }
            self.propose(goals, &visited)?;
            return Ok(Vec::new());
        };

        let snapshot = self.snapshot.clone();
        let net = self.net.clone();
        let inference = Inference::new(&net, &snapshot.params);
        let goal_feats = inference.encode(obs_matrix([&goal]))?;
        let goal_embedding = if self.reward.kind.uses_embedding() {
            Some(inference.embed(goal_feats.clone())?.into_data())
        } else {
            None
        };
        let mut recurrent = inference.initial_state(1);
        let mut observations = Vec::with_capacity(self.horizon + 1);
        let mut actions = Vec::with_capacity(self.horizon);
        observations.push(self.obs.clone());
        for t in 1..=self.horizon {
            let hs = inference.encode(obs_matrix([&self.obs]))?;
            let (q, next) = inference.q_values(hs, goal_feats.clone(), t, self.horizon, recurrent)?;
            recurrent = next;
            let a = epsilon_greedy(q.data(), self.epsilon, &mut self.rng);
            self.step(a)?;
            actions.push(a);
            observations.push(self.obs.clone());
        }
        self.propose(goals, &observations[1..])?;

        let final_obs = observations.last().expect("episode has observations");
        let provider_reward = self
            .reward
            .reward(&inference, final_obs, &goal, goal_embedding.as_deref())?;
        let mut rewards = vec![0.0; self.horizon];
        rewards[self.horizon - 1] = provider_reward;
        let original = GoalEpisode {
            goal,
            observations,
            actions,
            rewards,
            relabelled: false,
        };
        let fresh = match hindsight_goal(&original, &self.hindsight, &mut self.rng) {
            Some(g) => {
                let mut ep = original.clone();
                apply_relabel(&mut ep, g);
                Arc::new(ep)
            }
            None => Arc::new(original.clone()),
        };
        self.replay.push(Arc::new(original));
        self.episodes += 1;
        self.since_poll += 1;

        let mut out = Vec::with_capacity(1 + self.replay_ratio);
        out.push(self.emit(fresh, false, provider_reward));
        for _ in 0..self.replay_ratio {
            if let Some(ep) = self.replay.sample(&mut self.rng) {
                let r = ep.terminal_reward();
                out.push(self.emit(ep, true, r));
            }
        }
        Ok(out)
    }

    fn emit(&mut self, episode: Arc<GoalEpisode>, replay: bool, provider_reward: f64) -> Trajectory {
        let t = Trajectory {
            actor: self.id,
            seq: self.seq,
            replay,
            provider_reward,
            episode,
        };
        self.seq += 1;
        t
    }

    fn propose(&mut self, goals: &Mutex<GoalBuffer>, visited: &[Observation]) -> Result<(), RuntimeError> {
        let mut buf = goals.lock().map_err(|_| RuntimeError::Poisoned)?;
        for o in visited {
            buf.propose_with(o, &mut self.rng);
        }
        Ok(())
    }
}
