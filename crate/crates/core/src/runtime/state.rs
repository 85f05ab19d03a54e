//! Mapping of training state onto checkpoint entries.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use super::{Actor, Checkpoint, CheckpointError, Learner, ParamSnapshot, Trajectory};
use crate::agent::{GoalEpisode, ReplayBuffer};
use crate::env::{GridWorld, GridWorldConfig, Observation};
use crate::eval::MetricsRow;
use crate::goalbuf::{GoalBuffer, GoalBufferConfig};
use crate::math::Tensor;
use crate::nets::{Params, ParamSet};
use crate::rng;

fn invalid(name: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid {
        name: name.into(),
        reason: reason.into(),
    }
}

fn put_group(ck: &mut Checkpoint, prefix: &str, group: &Params) {
    for (name, t) in group {
        ck.put_floats(format!("{prefix}{name}"), t.shape(), t.data().to_vec());
    }
}

fn get_group(ck: &Checkpoint, prefix: &str) -> Result<Params, CheckpointError> {
    let names: Vec<String> = ck.names_with_prefix(prefix).map(str::to_string).collect();
    names
        .into_iter()
        .map(|n| {
            let full = format!("{prefix}{n}");
            let (shape, data) = ck.floats(&full)?;
            let t = Tensor::new(shape.to_vec(), data.to_vec()).map_err(|e| invalid(&full, e.to_string()))?;
            Ok((n, Arc::new(t)))
        })
        .collect()
}

pub fn save_params(ck: &mut Checkpoint, prefix: &str, params: &ParamSet) {
    put_group(ck, &format!("{prefix}theta."), &params.theta);
    put_group(ck, &format!("{prefix}phi."), &params.phi);
}

pub fn load_params(ck: &Checkpoint, prefix: &str) -> Result<ParamSet, CheckpointError> {
    let theta = get_group(ck, &format!("{prefix}theta."))?;
    let phi = get_group(ck, &format!("{prefix}phi."))?;
    if theta.is_empty() || phi.is_empty() {
        return Err(CheckpointError::Missing(format!("{prefix}theta./phi.")));
    }
    Ok(ParamSet { theta, phi })
}

/// Observations as a value table plus one byte code per scalar when at most
/// 256 distinct values occur; raw `f64`s otherwise.
fn put_observations(ck: &mut Checkpoint, name: &str, obs: &[&Observation]) {
    let (h, w) = obs.first().map_or((0, 0), |o| (o.height(), o.width()));
    ck.put_u64s(format!("{name}.shape"), &[obs.len() as u64, h as u64, w as u64]);
    let mut table: Vec<f64> = Vec::new();
    let mut index: BTreeMap<u64, u8> = BTreeMap::new();
    let mut codes = Vec::with_capacity(obs.iter().map(|o| o.len()).sum());
    for v in obs.iter().flat_map(|o| o.data()) {
        let bits = v.to_bits();
        let code = match index.get(&bits) {
            Some(&c) => c,
            None if table.len() < 256 => {
                let c = table.len() as u8;
                index.insert(bits, c);
                table.push(*v);
                c
            }
            None => {
                let raw: Vec<f64> = obs.iter().flat_map(|o| o.data().iter().copied()).collect();
                let n = raw.len();
                ck.put_floats(format!("{name}.raw"), &[n], raw);
                return;
            }
        };
        codes.push(code);
    }
    let n = table.len();
    ck.put_floats(format!("{name}.table"), &[n], table);
    ck.put_bytes(format!("{name}.codes"), codes);
}

fn get_observations(ck: &Checkpoint, name: &str) -> Result<Vec<Observation>, CheckpointError> {
    let shape = ck.u64s(&format!("{name}.shape"))?;
    let [count, h, w] = shape[..] else {
        return Err(invalid(name, "bad observation shape"));
    };
    let (count, h, w) = (count as usize, h as usize, w as usize);
    let len = h * w * crate::env::CHANNELS;
    let values: Vec<f64> = match ck.floats(&format!("{name}.raw")) {
        Ok((_, raw)) => raw.to_vec(),
        Err(_) => {
            let (_, table) = ck.floats(&format!("{name}.table"))?;
            let codes = ck.bytes(&format!("{name}.codes"))?;
            codes
                .iter()
                .map(|&c| table.get(c as usize).copied().ok_or_else(|| invalid(name, "code outside table")))
                .collect::<Result<_, _>>()?
        }
    };
    if values.len() != count * len {
        return Err(invalid(name, format!("{} values for {count} observations", values.len())));
    }
    values
        .chunks(len.max(1))
        .take(count)
        .map(|c| Observation::new(h, w, c.to_vec()).map_err(|e| invalid(name, e.to_string())))
        .collect()
}

fn put_episode(ck: &mut Checkpoint, name: &str, ep: &GoalEpisode) {
    let obs: Vec<&Observation> = std::iter::once(&ep.goal).chain(&ep.observations).collect();
    put_observations(ck, &format!("{name}.obs"), &obs);
    let actions: Vec<u64> = ep.actions.iter().map(|&a| a as u64).collect();
    ck.put_u64s(format!("{name}.actions"), &actions);
    ck.put_floats(format!("{name}.rewards"), &[ep.rewards.len()], ep.rewards.clone());
    ck.put_u64s(format!("{name}.relabelled"), &[u64::from(ep.relabelled)]);
}

fn get_episode(ck: &Checkpoint, name: &str) -> Result<GoalEpisode, CheckpointError> {
    let mut obs = get_observations(ck, &format!("{name}.obs"))?;
    if obs.len() < 2 {
        return Err(invalid(name, "episode without observations"));
    }
    let goal = obs.remove(0);
    let ep = GoalEpisode {
        goal,
        observations: obs,
        actions: ck
            .u64s(&format!("{name}.actions"))?
            .into_iter()
            .map(|a| a as usize)
            .collect(),
        rewards: ck.floats(&format!("{name}.rewards"))?.1.to_vec(),
        relabelled: ck.u64s(&format!("{name}.relabelled"))?.first() == Some(&1),
    };
    ep.validate().map_err(|e| invalid(name, e.to_string()))?;
    Ok(ep)
}

fn put_rng(ck: &mut Checkpoint, name: &str, r: &rng::Rng) {
    ck.put_bytes(name, rng::save_state(r));
}

fn get_rng(ck: &Checkpoint, name: &str) -> Result<rng::Rng, CheckpointError> {
    rng::load_state(ck.bytes(name)?).ok_or_else(|| invalid(name, "bad generator state"))
}

fn u64_at(v: &[u64], i: usize, name: &str) -> Result<u64, CheckpointError> {
    v.get(i).copied().ok_or_else(|| invalid(name, "too few values"))
}

pub(crate) fn save_goal_buffer(ck: &mut Checkpoint, buf: &GoalBuffer) {
    let slots: Vec<&Observation> = buf.slots().iter().collect();
    put_observations(ck, "goals.slots", &slots);
    put_rng(ck, "goals.rng", buf.rng());
}

pub fn load_goal_buffer(ck: &Checkpoint, config: GoalBufferConfig) -> Result<GoalBuffer, CheckpointError> {
    let slots = get_observations(ck, "goals.slots")?;
    if slots.len() > config.capacity {
        return Err(invalid("goals.slots", "more slots than capacity"));
    }
    Ok(GoalBuffer::restore(config, slots, get_rng(ck, "goals.rng")?))
}

pub(crate) fn save_trajectory(ck: &mut Checkpoint, name: &str, t: &Trajectory) {
    ck.put_u64s(
        format!("{name}.meta"),
        &[t.actor as u64, t.seq, u64::from(t.replay)],
    );
    ck.put_floats(format!("{name}.provider_reward"), &[1], vec![t.provider_reward]);
    put_episode(ck, &format!("{name}.episode"), &t.episode);
}

pub(crate) fn load_trajectory(ck: &Checkpoint, name: &str) -> Result<Trajectory, CheckpointError> {
    let meta_name = format!("{name}.meta");
    let meta = ck.u64s(&meta_name)?;
    Ok(Trajectory {
        actor: u64_at(&meta, 0, &meta_name)? as usize,
        seq: u64_at(&meta, 1, &meta_name)?,
        replay: u64_at(&meta, 2, &meta_name)? == 1,
        provider_reward: ck.floats(&format!("{name}.provider_reward"))?.1[0],
        episode: Arc::new(get_episode(ck, &format!("{name}.episode"))?),
    })
}

pub(crate) fn save_actor(ck: &mut Checkpoint, prefix: &str, a: &Actor) {
    let (words, env_rng) = a.env.export_state();
    ck.put_u64s(format!("{prefix}env.words"), &words);
    ck.put_bytes(format!("{prefix}env.rng"), env_rng);
    put_rng(ck, &format!("{prefix}rng"), &a.rng);
    ck.put_u64s(
        format!("{prefix}counters"),
        &[a.seq, a.episodes, a.since_poll, a.steps, a.snapshot.version],
    );
    save_params(ck, &format!("{prefix}snap."), &a.snapshot.params);
    let replay: Vec<&Arc<GoalEpisode>> = a.replay.iter().collect();
    ck.put_u64s(format!("{prefix}replay.len"), &[replay.len() as u64]);
    for (i, ep) in replay.iter().enumerate() {
        put_episode(ck, &format!("{prefix}replay.{i:06}"), ep);
    }
}

pub(crate) fn load_actor(
    ck: &Checkpoint,
    prefix: &str,
    env_cfg: &GridWorldConfig,
    mut actor: Actor,
) -> Result<Actor, CheckpointError> {
    let words = ck.u64s(&format!("{prefix}env.words"))?;
    actor.env = GridWorld::import_state(env_cfg, &words, ck.bytes(&format!("{prefix}env.rng"))?)
        .ok_or_else(|| invalid(prefix, "environment state does not fit config"))?;
    actor.restore_observation();
    actor.rng = get_rng(ck, &format!("{prefix}rng"))?;
    let name = format!("{prefix}counters");
    let c = ck.u64s(&name)?;
    actor.seq = u64_at(&c, 0, &name)?;
    actor.episodes = u64_at(&c, 1, &name)?;
    actor.since_poll = u64_at(&c, 2, &name)?;
    actor.steps = u64_at(&c, 3, &name)?;
    actor.snapshot = Arc::new(ParamSnapshot {
        version: u64_at(&c, 4, &name)?,
        params: load_params(ck, &format!("{prefix}snap."))?,
    });
    let name = format!("{prefix}replay.len");
    let n = u64_at(&ck.u64s(&name)?, 0, &name)? as usize;
    let mut replay = ReplayBuffer::new(actor.replay.capacity());
    for i in 0..n {
        replay.push(Arc::new(get_episode(ck, &format!("{prefix}replay.{i:06}"))?));
    }
    actor.replay = replay;
    Ok(actor)
}

/// Checkpoint prefix of the learner's current parameters.
pub const LEARNER_PARAMS: &str = "params.";

pub(crate) fn save_learner(ck: &mut Checkpoint, l: &Learner) {
    save_params(ck, LEARNER_PARAMS, &l.params);
    save_params(ck, "learner.snap.", &l.snapshot.params);
    for (name, acc) in l.optimizer.accumulators() {
        ck.put_floats(format!("learner.opt.{name}"), acc.shape(), acc.data().to_vec());
    }
    put_rng(ck, "learner.rng", &l.rng);
    ck.put_u64s(
        "learner.counters",
        &[l.updates, l.snapshot.version, l.consumed, l.audit.violations],
    );
    ck.put_u64s("learner.audit", &l.audit.next);
    let w = &l.window;
    ck.put_floats(
        "learner.window",
        &[6],
        vec![
            w.td_sum,
            w.td_n as f64,
            w.disc_sum,
            w.disc_n as f64,
            w.reward_sum,
            w.reward_n as f64,
        ],
    );
}

pub(crate) fn load_learner(ck: &Checkpoint, mut l: Learner) -> Result<Learner, CheckpointError> {
    l.params = load_params(ck, LEARNER_PARAMS)?;
    let names: Vec<String> = ck.names_with_prefix("learner.opt.").map(str::to_string).collect();
    for n in names {
        let (shape, data) = ck.floats(&format!("learner.opt.{n}"))?;
        let t = Tensor::new(shape.to_vec(), data.to_vec()).map_err(|e| invalid(&n, e.to_string()))?;
        l.optimizer.set_accumulator(&n, t);
    }
    l.rng = get_rng(ck, "learner.rng")?;
    let c = ck.u64s("learner.counters")?;
    l.updates = u64_at(&c, 0, "learner.counters")?;
    l.snapshot = Arc::new(ParamSnapshot {
        version: u64_at(&c, 1, "learner.counters")?,
        params: load_params(ck, "learner.snap.")?,
    });
    l.consumed = u64_at(&c, 2, "learner.counters")?;
    l.audit.violations = u64_at(&c, 3, "learner.counters")?;
    l.audit.next = ck.u64s("learner.audit")?;
    let (_, w) = ck.floats("learner.window")?;
    if w.len() != 6 {
        return Err(invalid("learner.window", "expected 6 values"));
    }
    l.window = super::Window {
        td_sum: w[0],
        td_n: w[1] as u64,
        disc_sum: w[2],
        disc_n: w[3] as u64,
        reward_sum: w[4],
        reward_n: w[5] as u64,
    };
    Ok(l)
}

pub(crate) fn save_rows(ck: &mut Checkpoint, rows: &[MetricsRow]) {
    let dims = rows.first().map_or(0, |r| r.achievement_dims.len());
    let mut data = Vec::with_capacity(rows.len() * (6 + dims));
    for r in rows {
        data.extend([
            r.frames as f64,
            r.wall_seconds,
            r.td_loss,
            r.disc_loss,
            r.mean_reward,
            r.achievement_overall,
        ]);
        data.extend(&r.achievement_dims);
    }
    ck.put_floats("metrics.rows", &[rows.len(), 6 + dims], data);
}

pub(crate) fn load_rows(ck: &Checkpoint) -> Result<Vec<MetricsRow>, CheckpointError> {
    let (shape, data) = ck.floats("metrics.rows")?;
    let [n, cols] = shape[..] else {
        return Err(invalid("metrics.rows", "expected a matrix"));
    };
    if n > 0 && cols < 6 {
        return Err(invalid("metrics.rows", "too few columns"));
    }
    Ok((0..n)
        .map(|i| {
            let r = &data[i * cols..(i + 1) * cols];
            MetricsRow {
                frames: r[0] as u64,
                wall_seconds: r[1],
                td_loss: r[2],
                disc_loss: r[3],
                mean_reward: r[4],
                achievement_overall: r[5],
                achievement_dims: r[6..].to_vec(),
            }
        })
        .collect())
}

pub(crate) fn save_pending(ck: &mut Checkpoint, pending: &VecDeque<Trajectory>) {
    ck.put_u64s("pending.len", &[pending.len() as u64]);
    for (i, t) in pending.iter().enumerate() {
        save_trajectory(ck, &format!("pending.{i:06}"), t);
    }
}

pub(crate) fn load_pending(ck: &Checkpoint) -> Result<VecDeque<Trajectory>, CheckpointError> {
    let n = u64_at(&ck.u64s("pending.len")?, 0, "pending.len")? as usize;
    (0..n).map(|i| load_trajectory(ck, &format!("pending.{i:06}"))).collect()
}
