use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use crossbeam::channel;

use super::state::{
    load_actor, load_learner, load_pending, load_rows, save_actor, save_goal_buffer, save_learner, save_pending,
    save_rows,
};
use super::{
    load_goal_buffer, Actor, Checkpoint, ExperimentConfig, Learner, RuntimeError, Schedule,
    Trajectory, Window,
};
use crate::eval::{emit_report, evaluate, write_metrics_csv, GoalSet, GreedyPolicy, MetricsRow};
use crate::goalbuf::GoalBuffer;
use crate::nets::{NetConfig, ParamSet};
use crate::rng;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Frames between intermediate checkpoints (lockstep only); 0 disables them.
    pub checkpoint_every: u64,
    /// Write `checkpoint.bin` when training ends.
    pub final_checkpoint: bool,
    /// Series name used in plots.
    pub label: String,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: None,
            checkpoint_every: 0,
            final_checkpoint: true,
            label: "run".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub frames: u64,
    pub actor_steps: Vec<u64>,
    pub updates: u64,
    pub rows: Vec<MetricsRow>,
    /// Trajectories emitted by actors.
    pub emitted: u64,
    /// Trajectories that reached the learner.
    pub received: u64,
    /// Trajectories used in updates.
    pub consumed: u64,
    /// Received but still waiting for a full batch.
    pub pending: u64,
    pub sequence_violations: u64,
    pub snapshot_version: u64,
    pub checkpoint: Option<PathBuf>,
}

struct Session<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a TrainOptions,
    net: NetConfig,
    learner: Learner,
    actors: Vec<Actor>,
    goals: Arc<Mutex<GoalBuffer>>,
    pending: VecDeque<Trajectory>,
    frames: u64,
    next_eval: u64,
    next_actor: usize,
    rows: Vec<MetricsRow>,
    elapsed_before: f64,
    started: Instant,
    eval_goals: GoalSet,
}

/// Seed of the evaluation streams, kept apart from every training stream.
pub(crate) fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive_seed(cfg.seed, "eval", 0)
}

pub(crate) fn eval_goal_set(cfg: &ExperimentConfig) -> Result<GoalSet, RuntimeError> {
    Ok(GoalSet::build(
        &cfg.env,
        cfg.eval_goals,
        rng::derive_seed(cfg.seed, "eval-goals", 0),
    )?)
}

fn metrics_row(
    cfg: &ExperimentConfig,
    net: &NetConfig,
    params: &ParamSet,
    goals: &GoalSet,
    frames: u64,
    wall_seconds: f64,
    window: Window,
) -> Result<MetricsRow, RuntimeError> {
    let mut policy = GreedyPolicy::new(net, params);
    let report = evaluate(
        &mut policy,
        &cfg.env,
        goals,
        cfg.eval_trials,
        cfg.episode_length,
        eval_seed(cfg),
    )?;
    log::info!(
        "frames {frames}: achieved {:.3} (dims {:?}), td {:.4e}, disc {:.4}, reward {:.3}",
        report.overall(),
        report.dim_fractions(),
        window.td(),
        window.disc(),
        window.reward()
    );
    Ok(MetricsRow {
        frames,
        wall_seconds,
        td_loss: window.td(),
        disc_loss: window.disc(),
        mean_reward: window.reward(),
        achievement_overall: report.overall(),
        achievement_dims: report.dim_fractions(),
    })
}

fn write_rows(dir: &Path, rows: &[MetricsRow]) -> Result<(), RuntimeError> {
    if !rows.is_empty() {
        std::fs::write(dir.join("metrics.csv"), write_metrics_csv(rows)?)?;
    }
    Ok(())
}

/// Trains until `cfg.total_frames` environment steps have been taken, writing
/// metrics, plots and a final checkpoint into `opts.out_dir`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary, RuntimeError> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("config.txt"), cfg.render())?;
    let mut session = Session::start(cfg, opts)?;
    session.eval_goals.save(&opts.out_dir.join("goals.bin"))?;
    match cfg.resolved_schedule() {
        Schedule::Threaded => session.run_threaded()?,
        _ => session.run_lockstep()?,
    }
    session.finish()
}

impl<'a> Session<'a> {
    fn start(cfg: &'a ExperimentConfig, opts: &'a TrainOptions) -> Result<Self, RuntimeError> {
        let mut learner = Learner::new(cfg);
        let mut goals = GoalBuffer::with_rng(cfg.goal_buffer.clone(), rng::stream(cfg.seed, "goal-buffer", 0));
        let mut actors = (0..cfg.actors)
            .map(|i| Actor::new(cfg, i, learner.snapshot()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut session_state = (0, cfg.eval_every, 0, Vec::new(), 0.0, VecDeque::new());
        if let Some(path) = &opts.resume {
            let ck = Checkpoint::load(path)?;
            ck.check_config(cfg.hash())?;
            learner = load_learner(&ck, learner)?;
            goals = load_goal_buffer(&ck, cfg.goal_buffer.clone())?;
            actors = actors
                .into_iter()
                .enumerate()
                .map(|(i, a)| load_actor(&ck, &format!("actor.{i:03}."), &cfg.env, a))
                .collect::<Result<_, _>>()?;
            let s = ck.u64s("session.counters")?;
            let (_, elapsed) = ck.floats("session.elapsed")?;
            if s.len() != 3 || elapsed.len() != 1 {
                return Err(super::CheckpointError::Invalid {
                    name: "session".into(),
                    reason: "malformed counters".into(),
                }
                .into());
            }
            session_state = (s[0], s[1], s[2] as usize, load_rows(&ck)?, elapsed[0], load_pending(&ck)?);
            log::info!("resumed from {} at frame {}", path.display(), s[0]);
        }
        let (frames, next_eval, next_actor, rows, elapsed_before, pending) = session_state;
        Ok(Self {
            cfg,
            opts,
            net: cfg.net(),
            learner,
            actors,
            goals: Arc::new(Mutex::new(goals)),
            pending,
            frames,
            next_eval,
            next_actor,
            rows,
            elapsed_before,
            started: Instant::now(),
            eval_goals: eval_goal_set(cfg)?,
        })
    }

    fn wall_seconds(&self) -> f64 {
        if self.cfg.wall_clock {
            self.elapsed_before + self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn drain_batches(&mut self) -> Result<bool, RuntimeError> {
        let b = self.learner.batch_size();
        let mut published = false;
        while self.pending.len() >= b {
            let batch: Vec<Trajectory> = self.pending.drain(..b).collect();
            published |= self.learner.update(&batch, &self.goals)?;
        }
        Ok(published)
    }

    fn eval_now(&mut self) -> Result<(), RuntimeError> {
        let window = self.learner.take_window();
        let row = metrics_row(
            self.cfg,
            &self.net,
            &self.learner.params,
            &self.eval_goals,
            self.frames,
            self.wall_seconds(),
            window,
        )?;
        self.rows.push(row);
        write_rows(&self.opts.out_dir, &self.rows)
    }

    fn run_lockstep(&mut self) -> Result<(), RuntimeError> {
        let total = self.cfg.total_frames;
        let every = self.opts.checkpoint_every;
        while self.frames < total {
            let i = self.next_actor;
            let snapshot = self.learner.snapshot();
            let actor = &mut self.actors[i];
            if actor.wants_poll() {
                actor.set_snapshot(snapshot);
            }
            let before = actor.steps();
            let out = actor.run(&self.goals)?;
            self.frames += actor.steps() - before;
            self.next_actor = (i + 1) % self.actors.len();
            for t in out {
                self.learner.receive(&t);
                self.pending.push_back(t);
            }
            self.drain_batches()?;
            while self.frames >= self.next_eval {
                self.eval_now()?;
                self.next_eval += self.cfg.eval_every;
            }
            if every > 0 && self.frames % every < self.cfg.episode_length as u64 && self.frames < total {
                self.save_checkpoint(&self.opts.out_dir.join(format!("checkpoint-{}.bin", self.frames)))?;
            }
        }
        Ok(())
    }

    fn run_threaded(&mut self) -> Result<(), RuntimeError> {
        let cfg = self.cfg;
        let horizon = cfg.episode_length as u64;
        let frames = AtomicU64::new(self.frames);
        let shared = RwLock::new(self.learner.snapshot());
        let (tx, rx) = channel::bounded::<Trajectory>(cfg.queue_capacity);
        let (eval_tx, eval_rx) = channel::unbounded::<(u64, f64, Window, ParamSet)>();
        let actors = std::mem::take(&mut self.actors);
        let goals = self.goals.clone();
        let out_dir = self.opts.out_dir.clone();
        let mut rows = std::mem::take(&mut self.rows);
        let (net, eval_goals) = (self.net.clone(), self.eval_goals.clone());
        let (net, eval_goals) = (&net, &eval_goals);

        let (actors, rows, learner_result) = std::thread::scope(|s| {
            let handles: Vec<_> = actors
                .into_iter()
                .map(|mut actor| {
                    let (tx, frames, shared, goals) = (tx.clone(), &frames, &shared, goals.clone());
                    s.spawn(move || -> Result<Actor, RuntimeError> {
                        loop {
                            if frames.fetch_add(horizon, Ordering::SeqCst) >= cfg.total_frames {
                                frames.fetch_sub(horizon, Ordering::SeqCst);
                                return Ok(actor);
                            }
                            if actor.wants_poll() {
                                let snap = shared.read().map_err(|_| RuntimeError::Poisoned)?.clone();
                                actor.set_snapshot(snap);
                            }
                            for t in actor.run(&goals)? {
                                if tx.send(t).is_err() {
                                    return Ok(actor);
                                }
                            }
                        }
                    })
                })
                .collect();
            drop(tx);

            let evaluator = s.spawn(move || -> Result<Vec<MetricsRow>, RuntimeError> {
                for (f, wall, window, params) in eval_rx {
                    rows.push(metrics_row(cfg, net, &params, eval_goals, f, wall, window)?);
                    write_rows(&out_dir, &rows)?;
                }
                Ok(rows)
            });

            let learner_result = (|| -> Result<(), RuntimeError> {
                let rx = rx;
                for t in rx.iter() {
                    self.learner.receive(&t);
                    self.pending.push_back(t);
                    if self.drain_batches()? {
                        *shared.write().map_err(|_| RuntimeError::Poisoned)? = self.learner.snapshot();
                    }
                    let f = frames.load(Ordering::SeqCst).min(cfg.total_frames);
                    while f >= self.next_eval {
                        let job = (f, self.wall_seconds(), self.learner.take_window(), self.learner.params.clone());
                        let _ = eval_tx.send(job);
                        self.next_eval += cfg.eval_every;
                    }
                }
                Ok(())
            })();
            if learner_result.is_err() {
                // Stop actors: no further episodes start once the budget looks spent.
                frames.store(u64::MAX / 2, Ordering::SeqCst);
            }
            let actors: Vec<_> = handles
                .into_iter()
                .map(|h| h.join().map_err(|_| RuntimeError::Poisoned).and_then(|r| r))
                .collect();
            self.frames = frames.load(Ordering::SeqCst);
            drop(eval_tx);
            let rows = evaluator.join().map_err(|_| RuntimeError::Poisoned).and_then(|r| r);
            (actors, rows, learner_result)
        });
        learner_result?;
        self.actors = actors.into_iter().collect::<Result<_, _>>()?;
        self.rows = rows?;
        self.frames = self.actors.iter().map(|a| a.steps()).sum();
        Ok(())
    }

    fn save_checkpoint(&self, path: &Path) -> Result<(), RuntimeError> {
        let mut ck = Checkpoint::new(self.cfg.hash());
        ck.put_bytes("config", self.cfg.render().into_bytes());
        save_learner(&mut ck, &self.learner);
        save_goal_buffer(&mut ck, &*self.goals.lock().map_err(|_| RuntimeError::Poisoned)?);
        for a in &self.actors {
            save_actor(&mut ck, &format!("actor.{:03}.", a.id()), a);
        }
        save_pending(&mut ck, &self.pending);
        save_rows(&mut ck, &self.rows);
        ck.put_u64s(
            "session.counters",
            &[self.frames, self.next_eval, self.next_actor as u64],
        );
        ck.put_floats("session.elapsed", &[1], vec![self.wall_seconds()]);
        ck.save(path)?;
        Ok(())
    }

    fn finish(mut self) -> Result<TrainSummary, RuntimeError> {
        if self.rows.last().is_none_or(|r| r.frames < self.frames) {
            self.eval_now()?;
        }
        emit_report(&self.opts.label, &self.rows, &self.opts.out_dir)?;
        let checkpoint = if self.opts.final_checkpoint {
            let path = self.opts.out_dir.join("checkpoint.bin");
            self.save_checkpoint(&path)?;
            Some(path)
        } else {
            None
        };
        let emitted = self.actors.iter().map(|a| a.seq).sum();
        Ok(TrainSummary {
            frames: self.frames,
            actor_steps: self.actors.iter().map(|a| a.steps()).collect(),
            updates: self.learner.updates(),
            rows: self.rows,
            emitted,
            received: self.learner.audit().received(),
            consumed: self.learner.consumed(),
            pending: self.pending.len() as u64,
            sequence_violations: self.learner.audit().violations(),
            snapshot_version: self.learner.snapshot().version,
            checkpoint,
        })
    }
}
