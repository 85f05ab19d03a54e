//! Grid worlds with one controllable avatar and action-independent distractors,
//! rendered to small RGB pixel grids.
//!
//! The ground-truth avatar position is exposed through
//! [`GridWorld::controllable_state`] for evaluation only; nothing on the training
//! path reads it.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;

use crate::rng::{self, Rng};

pub const CHANNELS: usize = 3;
pub const N_ACTIONS: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("grid {width}x{height} has too few cells")]
    DegenerateGrid { width: usize, height: usize },
    #[error("invalid action index {0} (expected < {N_ACTIONS})")]
    InvalidAction(usize),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    NoOp,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::NoOp,
    ];

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::InvalidAction(i))
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::NoOp => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistractorMotion {
    RandomWalk,
    Cyclic,
}

impl std::str::FromStr for DistractorMotion {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random-walk" => Ok(Self::RandomWalk),
            "cyclic" => Ok(Self::Cyclic),
            other => Err(EnvError::InvalidConfig(format!("unknown motion `{other}`"))),
        }
    }
}

impl fmt::Display for DistractorMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomWalk => "random-walk",
            Self::Cyclic => "cyclic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub avatar: [f64; 3],
    pub distractor: [f64; 3],
    pub background: [f64; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            avatar: [1.0, 0.0, 0.0],
            distractor: [0.0, 1.0, 0.0],
            background: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub n_distractors: usize,
    pub distractor_motion: DistractorMotion,
    /// Side length of each square distractor, in cells.
    pub distractor_size: usize,
    pub palette: Palette,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            n_distractors: 1,
            distractor_motion: DistractorMotion::RandomWalk,
            distractor_size: 1,
            palette: Palette::default(),
        }
    }
}

impl GridWorldConfig {
    /// Two 2×2 random-walk distractors: eight distractor pixels against one avatar pixel.
    pub fn distractor_dominant() -> Self {
        Self {
            n_distractors: 2,
            distractor_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width * self.height <= 1 {
            return Err(EnvError::DegenerateGrid {
                width: self.width,
                height: self.height,
            });
        }
        if self.n_distractors > 3 {
            return Err(EnvError::InvalidConfig("at most 3 distractors".into()));
        }
        if self.n_distractors > 0
            && (self.distractor_size == 0
                || self.distractor_size > self.width
                || self.distractor_size > self.height)
        {
            return Err(EnvError::InvalidConfig(
                "distractor size must fit inside the grid".into(),
            ));
        }
        let p = &self.palette;
        if p.avatar == p.distractor || p.avatar == p.background || p.distractor == p.background {
            return Err(EnvError::InvalidConfig("palette colors must be distinct".into()));
        }
        let in_range = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(in_range(&p.avatar) && in_range(&p.distractor) && in_range(&p.background)) {
            return Err(EnvError::InvalidConfig("palette values must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn obs_len(&self) -> usize {
        self.width * self.height * CHANNELS
    }

    /// Per-dimension extent of the controllable state (x, y).
    pub fn controllable_ranges(&self) -> [f64; 2] {
        [(self.width - 1) as f64, (self.height - 1) as f64]
    }
}

/// An `H×W×3` pixel grid with values in `[0,1]`, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Observation {
    height: usize,
    width: usize,
    data: Arc<[f64]>,
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observation({}x{}x{})", self.height, self.width, CHANNELS)
    }
}

impl Observation {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, EnvError> {
        if data.len() != height * width * CHANNELS {
            return Err(EnvError::InvalidConfig(format!(
                "observation data has {} values, expected {}",
                data.len(),
                height * width * CHANNELS
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EnvError::InvalidConfig("observation values must lie in [0,1]".into()));
        }
        Ok(Self {
            height,
            width,
            data: data.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn squared_distance(&self, other: &Observation) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn distance(&self, other: &Observation) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Distractor {
    x: usize,
    y: usize,
    /// Position along the cyclic loop.
    phase: usize,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    avatar: (usize, usize),
    distractors: Vec<Distractor>,
    rng: Rng,
    steps: u64,
}

impl PartialEq for EnvState {
    fn eq(&self, other: &Self) -> bool {
        self.avatar == other.avatar
            && self.distractors == other.distractors
            && self.steps == other.steps
            && rng::save_state(&self.rng) == rng::save_state(&other.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    config: GridWorldConfig,
    state: EnvState,
    cycle: Vec<(usize, usize)>,
}

/// Clockwise loop over the valid top-left positions of a distractor block. A
/// one-wide region degenerates to a back-and-forth sweep.
fn distractor_cycle(config: &GridWorldConfig) -> Vec<(usize, usize)> {
    let s = config.distractor_size.max(1);
    if s > config.width || s > config.height {
        return Vec::new();
    }
    let (w, h) = (config.width - s + 1, config.height - s + 1);
    if w == 1 || h == 1 {
        let line: Vec<(usize, usize)> = if w == 1 {
            (0..h).map(|y| (0, y)).collect()
        } else {
            (0..w).map(|x| (x, 0)).collect()
        };
        let back = line.iter().rev().skip(1).take(line.len().saturating_sub(2)).copied();
        return line.iter().copied().chain(back).collect();
    }
    let mut cells = Vec::new();
    cells.extend((0..w).map(|x| (x, 0)));
    cells.extend((1..h).map(|y| (w - 1, y)));
    cells.extend((0..w - 1).rev().map(|x| (x, h - 1)));
    cells.extend((1..h - 1).rev().map(|y| (0, y)));
    cells
}

impl GridWorld {
    pub fn reset(config: &GridWorldConfig, seed: u64) -> Result<(Self, Observation), EnvError> {
        config.validate()?;
        let mut rng = rng::stream(seed, "env", 0);
        let avatar = (
            rng.random_range(0..config.width),
            rng.random_range(0..config.height),
        );
        let cycle = distractor_cycle(config);
        let s = config.distractor_size;
        let mut distractors = Vec::with_capacity(config.n_distractors);
        for _ in 0..config.n_distractors {
            let d = match config.distractor_motion {
                DistractorMotion::RandomWalk => {
                    // Prefer a spot that leaves the avatar visible.
                    let mut pick = (0, 0);
                    for _ in 0..16 {
                        pick = (
                            rng.random_range(0..=config.width - s),
                            rng.random_range(0..=config.height - s),
                        );
                        if !covers(pick, s, avatar) {
                            break;
                        }
                    }
                    Distractor {
                        x: pick.0,
                        y: pick.1,
                        phase: 0,
                    }
                }
                DistractorMotion::Cyclic => {
                    let phase = rng.random_range(0..cycle.len());
                    let (x, y) = cycle[phase];
                    Distractor { x, y, phase }
                }
            };
            distractors.push(d);
        }
        let world = Self {
            config: config.clone(),
            state: EnvState {
                avatar,
                distractors,
                rng,
                steps: 0,
            },
            cycle,
        };
        let obs = world.render();
        Ok((world, obs))
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Environment steps taken since reset.
    pub fn steps(&self) -> u64 {
        self.state.steps
    }

    pub fn avatar(&self) -> (usize, usize) {
        self.state.avatar
    }

    pub fn distractor_positions(&self) -> Vec<(usize, usize)> {
        self.state.distractors.iter().map(|d| (d.x, d.y)).collect()
    }

    pub fn step(&mut self, action: usize) -> Result<Observation, EnvError> {
        let action = Action::from_index(action)?;
        let (dx, dy) = action.delta();
        let (x, y) = self.state.avatar;
        self.state.avatar = (
            clamp_move(x, dx, self.config.width),
            clamp_move(y, dy, self.config.height),
        );
        let s = self.config.distractor_size;
        for d in &mut self.state.distractors {
            match self.config.distractor_motion {
                DistractorMotion::RandomWalk => {
                    let (ddx, ddy) = Action::ALL[self.state.rng.random_range(0..4)].delta();
                    d.x = clamp_move(d.x, ddx, self.config.width - s + 1);
                    d.y = clamp_move(d.y, ddy, self.config.height - s + 1);
                }
                DistractorMotion::Cyclic => {
                    d.phase = (d.phase + 1) % self.cycle.len();
                    (d.x, d.y) = self.cycle[d.phase];
                }
            }
        }
        self.state.steps += 1;
        Ok(self.render())
    }

    /// Ground-truth avatar `(x, y)`; evaluation only.
    pub fn controllable_state(&self) -> [f64; 2] {
        let (x, y) = self.state.avatar;
        [x as f64, y as f64]
    }

    pub fn render(&self) -> Observation {
        let (w, h) = (self.config.width, self.config.height);
        let p = &self.config.palette;
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for _ in 0..w * h {
            data.extend_from_slice(&p.background);
        }
        let mut paint = |x: usize, y: usize, c: &[f64; 3]| {
            let i = (y * w + x) * CHANNELS;
            data[i..i + CHANNELS].copy_from_slice(c);
        };
        let s = self.config.distractor_size;
        for d in &self.state.distractors {
            for yy in d.y..d.y + s {
                for xx in d.x..d.x + s {
                    paint(xx, yy, &p.distractor);
                }
            }
        }
        let (ax, ay) = self.state.avatar;
        paint(ax, ay, &p.avatar);
        Observation {
            height: h,
            width: w,
            data: data.into(),
        }
    }

    /// Raw state for checkpointing: avatar, distractors (x, y, phase), step count, RNG.
    pub(crate) fn export_state(&self) -> (Vec<u64>, Vec<u8>) {
        let mut words = vec![
            self.state.avatar.0 as u64,
            self.state.avatar.1 as u64,
            self.state.steps,
        ];
        for d in &self.state.distractors {
            words.extend([d.x as u64, d.y as u64, d.phase as u64]);
        }
        (words, rng::save_state(&self.state.rng))
    }

    pub(crate) fn import_state(
        config: &GridWorldConfig,
        words: &[u64],
        rng_bytes: &[u8],
    ) -> Option<Self> {
        config.validate().ok()?;
        if words.len() != 3 + 3 * config.n_distractors {
            return None;
        }
        let distractors = words[3..]
            .chunks(3)
            .map(|c| Distractor {
                x: c[0] as usize,
                y: c[1] as usize,
                phase: c[2] as usize,
            })
            .collect();
        Some(Self {
            config: config.clone(),
            state: EnvState {
                avatar: (words[0] as usize, words[1] as usize),
                distractors,
                rng: rng::load_state(rng_bytes)?,
                steps: words[2],
            },
            cycle: distractor_cycle(config),
        })
    }

    #[cfg(test)]
    pub(crate) fn place_avatar(&mut self, x: usize, y: usize) {
        self.state.avatar = (x, y);
    }
}

fn covers(top_left: (usize, usize), size: usize, cell: (usize, usize)) -> bool {
    (top_left.0..top_left.0 + size).contains(&cell.0) && (top_left.1..top_left.1 + size).contains(&cell.1)
}

fn clamp_move(v: usize, d: isize, extent: usize) -> usize {
    (v as isize + d).clamp(0, extent as isize - 1) as usize
}
