//! Fixed-capacity evolving buffer of past observations from which training goals
//! and decoys are drawn.
//!
//! Until the buffer is full every proposed observation fills the next empty slot.
//! Afterwards a proposal is considered with probability `p_replace`:
//!
//! * **uniform**: a uniformly chosen slot is overwritten.
//! * **diverse**: a removal candidate `s_r` is chosen uniformly; it is replaced when
//!   it is closer (mean pixel L2 distance) to the rest of the buffer than the
//!   proposal is, and otherwise still replaced with probability `p_add_non_diverse`.

use std::fmt;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use crate::env::{Observation, CHANNELS};
use crate::rng::{self, Rng};

#[derive(Debug, thiserror::Error)]
pub enum GoalBufferError {
    #[error("goal buffer not warm: {filled} of {warmup} slots filled")]
    Cold { filled: usize, warmup: usize },
    #[error("decoy count must be at least 1")]
    NoDecoys,
    #[error("goal dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Uniform,
    Diverse,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "diverse" => Ok(Self::Diverse),
            other => Err(format!("unknown goal buffer strategy `{other}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Diverse => "diverse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalBufferConfig {
    pub capacity: usize,
    pub strategy: Strategy,
    pub p_replace: f64,
    pub p_add_non_diverse: f64,
    /// Filled slots required before goals may be sampled.
    pub warmup: usize,
}

impl Default for GoalBufferConfig {
    fn default() -> Self {
        Self {
            capacity: 1024,
            strategy: Strategy::Uniform,
            p_replace: 1e-3,
            p_add_non_diverse: 1e-3,
            warmup: 64,
        }
    }
}

/// Outcome of one substitution proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substitution {
    /// Buffer not yet full; the observation took the next empty slot.
    Filled(usize),
    /// Gate did not open; nothing considered.
    Skipped,
    /// Considered (diverse mode) but kept out.
    Rejected,
    Replaced { slot: usize, diverse: bool },
}

/// Random draws consumed by a single proposal.
#[derive(Clone, Copy, Debug)]
pub struct Draws {
    pub gate: f64,
    pub slot: usize,
    pub non_diverse: f64,
}

#[derive(Clone)]
pub struct GoalBuffer {
    config: GoalBufferConfig,
    slots: Vec<Observation>,
    rng: Rng,
}

impl fmt::Debug for GoalBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GoalBuffer")
            .field("config", &self.config)
            .field("filled", &self.slots.len())
            .finish()
    }
}

pub type SharedGoalBuffer = Arc<Mutex<GoalBuffer>>;

impl GoalBuffer {
    pub fn new(config: GoalBufferConfig, seed: u64) -> Self {
        Self::with_rng(config, rng::stream(seed, "goal-buffer", 0))
    }

    pub fn with_rng(config: GoalBufferConfig, rng: Rng) -> Self {
        let slots = Vec::with_capacity(config.capacity);
        Self { config, slots, rng }
    }

    pub fn config(&self) -> &GoalBufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.config.capacity
    }

    pub fn is_warm(&self) -> bool {
        self.slots.len() >= self.config.warmup.clamp(1, self.config.capacity)
    }

    pub fn slots(&self) -> &[Observation] {
        &self.slots
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Mean L2 distance from `candidate` to every slot except `exclude`.
    pub fn mean_distance_to_rest(&self, candidate: &Observation, exclude: usize) -> f64 {
        let n = self.slots.len().saturating_sub(1);
        if n == 0 {
            return 0.0;
        }
        let total: f64 = self
            .slots
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != exclude)
            .map(|(_, s)| candidate.distance(s))
            .sum();
        total / n as f64
    }

    pub fn propose(&mut self, obs: &Observation) -> Substitution {
        let mut rng = self.rng.clone();
        let out = self.propose_with(obs, &mut rng);
        self.rng = rng;
        out
    }

    pub fn propose_with(&mut self, obs: &Observation, rng: &mut impl rand::Rng) -> Substitution {
        if !self.is_full() {
            return self.substitute(obs, Draws { gate: 1.0, slot: 0, non_diverse: 1.0 });
        }
        let gate = rng.random::<f64>();
        if gate >= self.config.p_replace {
            return Substitution::Skipped;
        }
        let slot = rng.random_range(0..self.slots.len());
        let non_diverse = match self.config.strategy {
            Strategy::Uniform => 1.0,
            Strategy::Diverse => rng.random::<f64>(),
        };
        self.substitute(obs, Draws { gate, slot, non_diverse })
    }

    /// Applies one proposal given its random draws.
    pub fn substitute(&mut self, obs: &Observation, draws: Draws) -> Substitution {
        if !self.is_full() {
            self.slots.push(obs.clone());
            return Substitution::Filled(self.slots.len() - 1);
        }
        if draws.gate >= self.config.p_replace {
            return Substitution::Skipped;
        }
        let slot = draws.slot;
        match self.config.strategy {
            Strategy::Uniform => {
                self.slots[slot] = obs.clone();
                Substitution::Replaced { slot, diverse: false }
            }
            Strategy::Diverse => {
                let removal = self.mean_distance_to_rest(&self.slots[slot], slot);
                let incoming = self.mean_distance_to_rest(obs, slot);
                if removal < incoming {
                    self.slots[slot] = obs.clone();
                    Substitution::Replaced { slot, diverse: true }
                } else if draws.non_diverse < self.config.p_add_non_diverse {
                    self.slots[slot] = obs.clone();
                    Substitution::Replaced { slot, diverse: false }
                } else {
                    Substitution::Rejected
                }
            }
        }
    }

    fn ensure_warm(&self) -> Result<(), GoalBufferError> {
        if self.is_warm() {
            Ok(())
        } else {
            Err(GoalBufferError::Cold {
                filled: self.slots.len(),
                warmup: self.config.warmup,
            })
        }
    }

    pub fn sample_goal(&mut self) -> Result<Observation, GoalBufferError> {
        let mut rng = self.rng.clone();
        let out = self.sample_goal_with(&mut rng);
        self.rng = rng;
        out
    }

    pub fn sample_goal_with(&self, rng: &mut impl rand::Rng) -> Result<Observation, GoalBufferError> {
        self.ensure_warm()?;
        Ok(self.slots[rng.random_range(0..self.slots.len())].clone())
    }

    /// `k` independent uniform draws with replacement. A draw equal to `goal` is
    /// redrawn once and then accepted whatever it is.
    pub fn sample_decoys(
        &mut self,
        k: usize,
        goal: Option<&Observation>,
    ) -> Result<Vec<Observation>, GoalBufferError> {
        let mut rng = self.rng.clone();
        let out = self.sample_decoys_with(k, goal, &mut rng);
        self.rng = rng;
        out
    }

    pub fn sample_decoys_with(
        &self,
        k: usize,
        goal: Option<&Observation>,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<Observation>, GoalBufferError> {
        self.ensure_warm()?;
        if k == 0 {
            return Err(GoalBufferError::NoDecoys);
        }
        let n = self.slots.len();
        Ok((0..k)
            .map(|_| {
                let mut d = &self.slots[rng.random_range(0..n)];
                if goal == Some(d) {
                    d = &self.slots[rng.random_range(0..n)];
                }
                d.clone()
            })
            .collect())
    }

    pub(crate) fn restore(config: GoalBufferConfig, slots: Vec<Observation>, rng: Rng) -> Self {
        Self { config, slots, rng }
    }

    /// Writes `DSGB | u32 version | u64 capacity, filled, height, width, channels`
    /// followed by every filled slot as little-endian `f64`s.
    pub fn write_dump(&self, mut w: impl Write) -> Result<(), GoalBufferError> {
        let (h, wd) = self
            .slots
            .first()
            .map(|o| (o.height(), o.width()))
            .unwrap_or((0, 0));
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        for v in [self.config.capacity, self.slots.len(), h, wd, CHANNELS] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.slots {
            for v in s.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub const DUMP_MAGIC: &[u8; 4] = b"DSGB";
pub const DUMP_VERSION: u32 = 1;

/// Contents of a goal dump: capacity and the filled slots.
pub fn read_dump(mut r: impl Read) -> Result<(usize, Vec<Observation>), GoalBufferError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(GoalBufferError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != DUMP_VERSION {
        return Err(GoalBufferError::Format("unsupported version".into()));
    }
    let mut header = [0usize; 5];
    let mut b8 = [0u8; 8];
    for h in &mut header {
        r.read_exact(&mut b8)?;
        *h = u64::from_le_bytes(b8) as usize;
    }
    let [capacity, filled, height, width, channels] = header;
    if channels != CHANNELS || filled > capacity {
        return Err(GoalBufferError::Format("inconsistent header".into()));
    }
    let mut slots = Vec::with_capacity(filled);
    for _ in 0..filled {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width * CHANNELS {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        let obs = Observation::new(height, width, data)
            .map_err(|e| GoalBufferError::Format(e.to_string()))?;
        slots.push(obs);
    }
    Ok((capacity, slots))
}
