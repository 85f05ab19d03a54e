use std::borrow::Cow;
use std::sync::{Arc, Mutex};

use super::{ParamSnapshot, RuntimeError, Trajectory};
use crate::agent::{relabel_hindsight, td_update, GoalEpisode, HindsightConfig};
use crate::env::Observation;
use crate::goalbuf::GoalBuffer;
use crate::math::RmsProp;
use crate::nets::{NetConfig, ParamSet};
use crate::reward::{embedding_update, RewardKind};
use crate::rng::{self, Rng};
use crate::runtime::ExperimentConfig;

/// Per-actor sequence check: every trajectory must arrive exactly once and in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceAudit {
    pub(crate) next: Vec<u64>,
    pub(crate) violations: u64,
}

impl SequenceAudit {
    pub fn new(actors: usize) -> Self {
        Self {
            next: vec![0; actors],
            violations: 0,
        }
    }

    pub fn record(&mut self, actor: usize, seq: u64) {
        if actor >= self.next.len() {
            self.next.resize(actor + 1, 0);
        }
        if seq != self.next[actor] {
            log::error!(
                "actor {actor}: trajectory {seq} arrived, expected {}",
                self.next[actor]
            );
            self.violations += 1;
        }
        self.next[actor] = seq + 1;
    }

    /// Trajectories received so far.
    pub fn received(&self) -> u64 {
        self.next.iter().sum()
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }
}

/// Running sums since the last metrics row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Window {
    pub td_sum: f64,
    pub td_n: u64,
    pub disc_sum: f64,
    pub disc_n: u64,
    pub reward_sum: f64,
    pub reward_n: u64,
}

impl Window {
    fn mean(sum: f64, n: u64) -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn td(&self) -> f64 {
        Self::mean(self.td_sum, self.td_n)
    }

    pub fn disc(&self) -> f64 {
        Self::mean(self.disc_sum, self.disc_n)
    }

    pub fn reward(&self) -> f64 {
        Self::mean(self.reward_sum, self.reward_n)
    }
}

/// Owns the writable parameters and applies both updates per batch.
pub struct Learner {
    pub(crate) net: NetConfig,
    pub(crate) params: ParamSet,
    pub(crate) optimizer: RmsProp,
    pub(crate) rng: Rng,
    gamma: f64,
    lambda: f64,
    beta: f64,
    decoys: usize,
    hindsight: HindsightConfig,
    reward: RewardKind,
    batch_size: usize,
    broadcast_every: u64,
    pub(crate) updates: u64,
    pub(crate) snapshot: Arc<ParamSnapshot>,
    pub(crate) audit: SequenceAudit,
    pub(crate) window: Window,
    pub(crate) consumed: u64,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let net = cfg.net();
        let params = ParamSet::init(
            &net,
            cfg.reward == RewardKind::AutoEncoder,
            &mut rng::stream(cfg.seed, "init", 0),
        );
        let snapshot = Arc::new(ParamSnapshot {
            version: 0,
            params: params.clone(),
        });
        Self {
            net,
            params,
            optimizer: RmsProp::new(cfg.optimizer()),
            rng: rng::stream(cfg.seed, "learner", 0),
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            beta: cfg.beta(),
            decoys: cfg.decoys,
            hindsight: cfg.hindsight,
            reward: cfg.reward,
            batch_size: cfg.batch_size,
            broadcast_every: cfg.broadcast_every,
            updates: 0,
            snapshot,
            audit: SequenceAudit::new(cfg.actors),
            window: Window::default(),
            consumed: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn audit(&self) -> &SequenceAudit {
        &self.audit
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// Latest broadcast parameters.
    pub fn snapshot(&self) -> Arc<ParamSnapshot> {
        self.snapshot.clone()
    }

    /// Called once per trajectory as it arrives.
    pub fn receive(&mut self, t: &Trajectory) {
        self.audit.record(t.actor, t.seq);
        if !t.replay {
            self.window.reward_sum += t.provider_reward;
            self.window.reward_n += 1;
        }
    }

    pub fn take_window(&mut self) -> Window {
        std::mem::take(&mut self.window)
    }

    /// One learner iteration over exactly one batch. Returns `true` when a new
    /// snapshot was published.
    pub fn update(&mut self, batch: &[Trajectory], goals: &Mutex<GoalBuffer>) -> Result<bool, RuntimeError> {
        let episodes: Vec<Cow<'_, GoalEpisode>> = batch
            .iter()
            .map(|t| {
                if t.replay {
                    Cow::Owned(relabel_hindsight(&t.episode, &self.hindsight, &mut self.rng))
                } else {
                    Cow::Borrowed(t.episode.as_ref())
                }
            })
            .collect();
        let b = episodes.len();
        let mut decoys: Vec<Observation> = Vec::with_capacity(b * self.decoys);
        if self.reward == RewardKind::Discern {
            let buf = goals.lock().map_err(|_| RuntimeError::Poisoned)?;
            let mut per_item = Vec::with_capacity(b);
            for ep in &episodes {
                per_item.push(buf.sample_decoys_with(self.decoys, Some(&ep.goal), &mut self.rng)?);
            }
            for k in 0..self.decoys {
                decoys.extend(per_item.iter().map(|d| d[k].clone()));
            }
        }
        let refs: Vec<&GoalEpisode> = episodes.iter().map(|e| e.as_ref()).collect();
        let td = td_update(
            &self.net,
            &mut self.params,
            &mut self.optimizer,
            &refs,
            self.gamma,
            self.lambda,
        )?;
        self.window.td_sum += td;
        self.window.td_n += 1;

        let finals: Vec<&Observation> = refs.iter().map(|e| e.final_observation()).collect();
        let goal_obs: Vec<&Observation> = refs.iter().map(|e| &e.goal).collect();
        let decoy_refs: Vec<&Observation> = decoys.iter().collect();
        if let Some(loss) = embedding_update(
            self.reward,
            &self.net,
            &mut self.params,
            &mut self.optimizer,
            &finals,
            &goal_obs,
            &decoy_refs,
            self.beta,
        )? {
            self.window.disc_sum += loss;
            self.window.disc_n += 1;
        }
        self.updates += 1;
        self.consumed += b as u64;
        if self.updates.is_multiple_of(self.broadcast_every) {
            self.snapshot = Arc::new(ParamSnapshot {
                version: self.snapshot.version + 1,
                params: self.params.clone(),
            });
            return Ok(true);
        }
        Ok(false)
    }
}
