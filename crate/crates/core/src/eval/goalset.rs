use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use super::EvalError;
use crate::env::{GridWorld, GridWorldConfig, Observation, CHANNELS, N_ACTIONS};
use crate::rng;

pub const GOALSET_MAGIC: &[u8; 4] = b"DSGS";
pub const GOALSET_VERSION: u32 = 1;

/// Random steps taken from reset before a goal is recorded.
pub const ROLLOUT_STEPS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct GoalEntry {
    pub observation: Observation,
    /// Ground-truth controllable state at the end of the rollout.
    pub truth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalSet {
    entries: Vec<GoalEntry>,
}

impl GoalSet {
    pub fn new(entries: Vec<GoalEntry>) -> Self {
        Self { entries }
    }

    /// Goals from uniformly random rollouts of [`ROLLOUT_STEPS`] steps, one
    /// independent stream per goal.
    pub fn build(env: &GridWorldConfig, n_goals: usize, seed: u64) -> Result<Self, EvalError> {
        let entries = (0..n_goals)
            .map(|i| {
                let mut r = rng::stream(seed, "goal-set", i as u64);
                let (mut world, mut obs) = GridWorld::reset(env, r.random())?;
                for _ in 0..ROLLOUT_STEPS {
                    obs = world.step(r.random_range(0..N_ACTIONS))?;
                }
                Ok(GoalEntry {
                    observation: obs,
                    truth: world.controllable_state().to_vec(),
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[GoalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `DSGS | u32 version | u64 count, height, width, channels, dims`, then per
    /// entry the observation followed by the ground truth, all `f64` LE.
    pub fn write(&self, mut w: impl Write) -> Result<(), EvalError> {
        let (h, wd, dims) = self.entries.first().map_or((0, 0, 0), |e| {
            (e.observation.height(), e.observation.width(), e.truth.len())
        });
        w.write_all(GOALSET_MAGIC)?;
        w.write_all(&GOALSET_VERSION.to_le_bytes())?;
        for v in [self.entries.len(), h, wd, CHANNELS, dims] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for e in &self.entries {
            for v in e.observation.data().iter().chain(&e.truth) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, EvalError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GOALSET_MAGIC {
            return Err(EvalError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != GOALSET_VERSION {
            return Err(EvalError::Format("unsupported version".into()));
        }
        let mut b8 = [0u8; 8];
        let mut header = [0usize; 5];
        for h in &mut header {
            r.read_exact(&mut b8)?;
            *h = u64::from_le_bytes(b8) as usize;
        }
        let [count, height, width, channels, dims] = header;
        if channels != CHANNELS {
            return Err(EvalError::Format(format!("{channels} channels")));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, EvalError> {
            (0..n)
                .map(|_| {
                    r.read_exact(&mut b8)?;
                    Ok(f64::from_le_bytes(b8))
                })
                .collect()
        };
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let data = read_f64s(height * width * CHANNELS)?;
            let observation =
                Observation::new(height, width, data).map_err(|e| EvalError::Format(e.to_string()))?;
            let truth = read_f64s(dims)?;
            entries.push(GoalEntry { observation, truth });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut bytes = Vec::new();
        self.write(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::read(std::fs::read(path)?.as_slice())
    }
}
