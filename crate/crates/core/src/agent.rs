//! Goal-conditioned Q-learning: acting, multi-step targets, hindsight
//! relabelling and the policy update.
//!
//! A goal episode of length `T` holds `T + 1` observations: the state each
//! action was taken in plus the final state reached by the last action. The
//! terminal reward scores that final state, and the hindsight window is drawn
//! from the last `H` observations ending with it.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::env::Observation;
use crate::math::{Axis, Graph, MathError, NodeId, RmsProp, Tensor};
use crate::nets::{obs_matrix, time_features, Net, NetConfig, NetError, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid hindsight config: {0}")]
    Hindsight(String),
    #[error("non-finite TD loss {0}; update refused")]
    NonFiniteLoss(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalEpisode {
    pub goal: Observation,
    /// `s_1 … s_{T+1}`.
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    /// Zero except the last entry.
    pub rewards: Vec<f64>,
    pub relabelled: bool,
}

impl GoalEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_observation(&self) -> &Observation {
        self.observations.last().expect("episode has observations")
    }

    pub fn terminal_reward(&self) -> f64 {
        self.rewards.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let t = self.actions.len();
        if t == 0 || self.observations.len() != t + 1 || self.rewards.len() != t {
            return Err(AgentError::Length(format!(
                "{} observations, {} actions, {} rewards",
                self.observations.len(),
                t,
                self.rewards.len()
            )));
        }
        Ok(())
    }
}

/// Per-step discounts with the bootstrap cut at the last step.
pub fn discounts(horizon: usize, gamma: f64) -> Vec<f64> {
    (0..horizon)
        .map(|t| if t + 1 == horizon { 0.0 } else { gamma })
        .collect()
}

/// First index of the maximum.
pub fn greedy(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

pub fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut impl rand::Rng) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        greedy(q)
    }
}

/// Peng's Q(λ) targets
///
/// ```text
/// G_t = r_t + γ_t [(1 − λ) max_a Q(s_{t+1}, a) + λ G_{t+1}]
/// ```
///
/// `q_all` is `[T, n]` with row `t` holding `Q(s_t, ·)`; `discounts[T−1]` is
/// expected to be 0, in which case the last row of `q_all` is never read.
pub fn peng_q_lambda_targets(
    rewards: &[f64],
    discounts: &[f64],
    q_all: &Tensor,
    lambda: f64,
) -> Result<Vec<f64>, AgentError> {
    let t = rewards.len();
    if discounts.len() != t || q_all.rows() != t {
        return Err(AgentError::Length(format!(
            "{} rewards, {} discounts, {} Q rows",
            t,
            discounts.len(),
            q_all.rows()
        )));
    }
    let mut targets = vec![0.0; t];
    let mut next = 0.0;
    for i in (0..t).rev() {
        let bootstrap = if i + 1 < t {
            let max_q = q_all.row_slice(i + 1).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (1.0 - lambda) * max_q + lambda * next
        } else {
            0.0
        };
        targets[i] = rewards[i] + discounts[i] * bootstrap;
        next = targets[i];
    }
    Ok(targets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HindsightConfig {
    pub p_her: f64,
    pub window: usize,
}

impl Default for HindsightConfig {
    fn default() -> Self {
        Self {
            p_her: 0.25,
            window: 3,
        }
    }
}

impl HindsightConfig {
    pub fn validate(&self, horizon: usize) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.p_her) {
            return Err(AgentError::Hindsight(format!("p_her = {}", self.p_her)));
        }
        if self.window == 0 || self.window > horizon {
            return Err(AgentError::Hindsight(format!(
                "window {} outside 1..={horizon}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Substitutes the goal with one of the last `H` observations and sets the
/// terminal reward to 1. Returns `None` when the gate does not open.
pub fn hindsight_goal(
    episode: &GoalEpisode,
    cfg: &HindsightConfig,
    rng: &mut impl rand::Rng,
) -> Option<Observation> {
    if rng.random::<f64>() >= cfg.p_her {
        return None;
    }
    let n = episode.observations.len();
    let h = cfg.window.min(n);
    Some(episode.observations[n - h + rng.random_range(0..h)].clone())
}

pub fn relabel_hindsight(
    episode: &GoalEpisode,
    cfg: &HindsightConfig,
    rng: &mut impl rand::Rng,
) -> GoalEpisode {
    let mut out = episode.clone();
    if let Some(goal) = hindsight_goal(episode, cfg, rng) {
        apply_relabel(&mut out, goal);
    }
    out
}

pub fn apply_relabel(episode: &mut GoalEpisode, goal: Observation) {
    episode.goal = goal;
    if let Some(r) = episode.rewards.last_mut() {
        *r = 1.0;
    }
    episode.relabelled = true;
}

/// Actor-local FIFO of past episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Arc<GoalEpisode>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, episode: Arc<GoalEpisode>) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Option<Arc<GoalEpisode>> {
        if self.episodes.is_empty() {
            return None;
        }
        Some(self.episodes[rng.random_range(0..self.episodes.len())].clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<GoalEpisode>> {
        self.episodes.iter()
    }
}

/// Per-step time features for `rows` sequences, laid out time-major.
fn time_block(horizon: usize, rows: usize) -> Result<Tensor, NetError> {
    let mut data = Vec::with_capacity(horizon * rows * 2);
    for t in 1..=horizon {
        let tf = time_features(t, horizon)?;
        for _ in 0..rows {
            data.extend_from_slice(&tf);
        }
    }
    Ok(Tensor::from_rows(horizon * rows, 2, data))
}

/// Unrolls the Q network over a batch of equal-length episodes.
///
/// Returns `Q` as a `[T·B, n]` node with row `t·B + b` holding step `t` of
/// episode `b`.
pub fn unroll_q(g: &mut Graph, net: &Net<'_>, batch: &[&GoalEpisode]) -> Result<NodeId, AgentError> {
    let b = batch.len();
    if b == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let horizon = batch[0].len();
    for ep in batch {
        ep.validate()?;
        if ep.len() != horizon {
            return Err(AgentError::Length(format!("episode lengths {} and {horizon}", ep.len())));
        }
    }
    let states = obs_matrix((0..horizon).flat_map(|t| batch.iter().map(move |ep| &ep.observations[t])));
    let goals = obs_matrix(batch.iter().map(|ep| &ep.goal));
    let s = g.input(states);
    let s = net.encode(g, s)?;
    let goal = g.input(goals);
    let hg = net.encode(g, goal)?;
    let tf = g.input(time_block(horizon, b)?);
    let th = net.time_hidden(g, tf)?;
    let mut h = g.input(Tensor::zeros(&[b, net.cfg.recurrent]));
    let mut qs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let hs = g.slice_rows(s, t * b, b)?;
        let th_t = g.slice_rows(th, t * b, b)?;
        let (q, psi) = net.q_step(g, hs, hg, th_t, h)?;
        qs.push(q);
        h = psi;
    }
    Ok(g.concat(&qs, Axis::Rows)?)
}

/// Builds `mean_t,b (Q(s_t, a_t) − G_t)²`, with targets taken as constants from
/// the same forward pass.
pub fn td_loss(
    g: &mut Graph,
    net: &Net<'_>,
    batch: &[&GoalEpisode],
    gamma: f64,
    lambda: f64,
) -> Result<NodeId, AgentError> {
    let q = unroll_q(g, net, batch)?;
    let b = batch.len();
    let horizon = batch[0].len();
    let n = net.cfg.actions;
    let q_val = g.value(q).clone();
    let disc = discounts(horizon, gamma);
    let mut targets = vec![0.0; horizon * b];
    for (j, ep) in batch.iter().enumerate() {
        let rows: Vec<f64> = (0..horizon)
            .flat_map(|t| q_val.row_slice(t * b + j).iter().copied())
            .collect();
        let q_ep = Tensor::from_rows(horizon, n, rows);
        let g_ep = peng_q_lambda_targets(&ep.rewards, &disc, &q_ep, lambda)?;
        for (t, v) in g_ep.into_iter().enumerate() {
            targets[t * b + j] = v;
        }
    }
    let index: Vec<usize> = (0..horizon)
        .flat_map(|t| batch.iter().map(move |ep| ep.actions[t]))
        .collect();
    let picked = g.pick(q, &index)?;
    let target = g.input(Tensor::from_rows(horizon * b, 1, targets));
    let err = g.sub(picked, target)?;
    let sq = g.square(err);
    Ok(g.mean(sq))
}

/// One RMSProp step on θ from the TD loss of `batch`. Returns the loss.
pub fn td_update(
    cfg: &NetConfig,
    params: &mut ParamSet,
    optimizer: &mut RmsProp,
    batch: &[&GoalEpisode],
    gamma: f64,
    lambda: f64,
) -> Result<f64, AgentError> {
    let mut g = Graph::new();
    let net = Net {
        cfg,
        params,
        train_theta: true,
        train_phi: false,
    };
    let loss = td_loss(&mut g, &net, batch, gamma, lambda)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        log::error!("TD loss is {value}; skipping update");
        return Err(AgentError::NonFiniteLoss(value));
    }
    let grads = g.backward(loss)?;
    drop(g);
    optimizer.step(&mut params.theta, &grads)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn obs(v: f64) -> Observation {
        Observation::new(1, 1, vec![v, 0.0, 0.0]).unwrap()
    }

    fn episode(t: usize) -> GoalEpisode {
        let mut rewards = vec![0.0; t];
        rewards[t - 1] = 0.5;
        GoalEpisode {
            goal: obs(0.0),
            observations: (0..=t).map(|i| obs(i as f64 / (t as f64))).collect(),
            actions: (0..t).map(|i| i % 5).collect(),
            rewards,
            relabelled: false,
        }
    }

    #[test]
    fn argmax_and_tie_break() {
        let mut r = rng::stream(0, "t", 0);
        assert_eq!(epsilon_greedy(&[0.1, 0.9, 0.3, 0.3, 0.2], 0.0, &mut r), 1);
        assert_eq!(epsilon_greedy(&[0.4; 5], 0.0, &mut r), 0);
    }

    #[test]
    fn zero_lambda_is_one_step() {
        let q = Tensor::from_rows(3, 2, vec![0.0, 1.0, 2.0, -1.0, 5.0, 7.0]);
        let r = [0.0, 0.0, 0.3];
        let d = discounts(3, 0.9);
        let g = peng_q_lambda_targets(&r, &d, &q, 0.0).unwrap();
        assert_eq!(g, vec![0.9 * 2.0, 0.9 * 7.0, 0.3]);
    }

    #[test]
    fn terminal_target_is_reward() {
        let q = Tensor::from_rows(2, 2, vec![9.0, 9.0, 9.0, 9.0]);
        for lambda in [0.0, 0.5, 1.0] {
            let g = peng_q_lambda_targets(&[0.0, 0.7], &discounts(2, 0.98), &q, lambda).unwrap();
            assert_eq!(g[1], 0.7);
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let q = Tensor::zeros(&[2, 5]);
        assert!(peng_q_lambda_targets(&[0.0; 3], &[0.9; 3], &q, 0.5).is_err());
    }

    #[test]
    fn relabel_gate_closed_leaves_episode() {
        let ep = episode(4);
        let cfg = HindsightConfig { p_her: 0.0, window: 3 };
        assert_eq!(relabel_hindsight(&ep, &cfg, &mut rng::stream(0, "t", 0)), ep);
    }

    #[test]
    fn single_frame_window_uses_final_state() {
        let ep = episode(4);
        let cfg = HindsightConfig { p_her: 1.0, window: 1 };
        let out = relabel_hindsight(&ep, &cfg, &mut rng::stream(0, "t", 0));
        assert_eq!(&out.goal, ep.final_observation());
        assert_eq!(out.terminal_reward(), 1.0);
        assert!(out.relabelled);
        assert!(out.rewards[..3].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn hindsight_validation() {
        assert!(HindsightConfig { p_her: 1.5, window: 3 }.validate(50).is_err());
        assert!(HindsightConfig { p_her: 0.2, window: 0 }.validate(50).is_err());
        assert!(HindsightConfig { p_her: 0.2, window: 51 }.validate(50).is_err());
        assert!(HindsightConfig::default().validate(50).is_ok());
    }

    #[test]
    fn replay_is_fifo() {
        let mut r = ReplayBuffer::new(2);
        for i in 0..3 {
            let mut ep = episode(2);
            ep.rewards[1] = i as f64;
            r.push(Arc::new(ep));
        }
        let tags: Vec<f64> = r.iter().map(|e| e.terminal_reward()).collect();
        assert_eq!(tags, vec![1.0, 2.0]);
    }

    #[test]
    fn td_loss_is_zero_when_targets_match() {
        // Zero parameters give Q = 0 everywhere; zero rewards give zero targets.
        let mut cfg = NetConfig::new(3);
        cfg.encoder_hidden = 4;
        cfg.features = 3;
        cfg.recurrent = 4;
        cfg.time_hidden = 2;
        cfg.embedding = 2;
        let mut p = ParamSet::init(&cfg, false, &mut rng::stream(0, "t", 0));
        for v in p.theta.values_mut() {
            *v = Arc::new(Tensor::zeros(v.shape()));
        }
        let mut ep = episode(3);
        ep.rewards = vec![0.0; 3];
        let before = p.clone();
        let mut opt = RmsProp::new(Default::default());
        let loss = td_update(&cfg, &mut p, &mut opt, &[&ep], 0.98, 0.9).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p, before);
    }
}
