use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use discern::eval::{
    apply_preset, emit_report, evaluate, learning_curve_svg, parse_metrics_csv, write_metrics_csv, GoalSet,
    GreedyPolicy, MetricsRow,
};
use discern::runtime::{load_goal_buffer, load_params, train, Checkpoint, ExperimentConfig, TrainOptions, LEARNER_PARAMS};

#[derive(Parser)]
#[command(name = "discern", about = "Goal-conditioned agents with learned goal-achievement rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, plots and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        actors: Option<usize>,
        #[arg(long)]
        frames: Option<u64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Frames between intermediate checkpoints (0 = none).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Evaluate a checkpoint's greedy policy on a goal set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        goals: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the trial resets; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the goal buffer stored in a checkpoint.
    DumpGoals {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a fixed evaluation goal set.
    MakeGoals {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot several runs' metrics on one learning-curve chart.
    Report {
        /// Run directories, each holding a `metrics.csv`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn checkpoint_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    let text = String::from_utf8(ck.bytes("config")?.to_vec()).context("checkpoint config is not UTF-8")?;
    let cfg = ExperimentConfig::parse(&text)?;
    ck.check_config(cfg.hash())?;
    Ok(cfg)
}

fn series_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            preset,
            seed,
            actors,
            frames,
            overrides,
            resume,
            checkpoint_every,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = &preset {
                apply_preset(&mut cfg, p)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = actors {
                cfg.actors = a;
            }
            if let Some(f) = frames {
                cfg.total_frames = f;
            }
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("override `{kv}` is not KEY=VALUE");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            let mut opts = TrainOptions::new(&out);
            opts.resume = resume;
            opts.checkpoint_every = checkpoint_every;
            opts.label = preset.unwrap_or_else(|| series_name(&out));
            let summary = train(&cfg, &opts)?;
            let last = summary.rows.last().map_or(f64::NAN, |r| r.achievement_overall);
            println!(
                "frames {} updates {} achievement {:.4} -> {}",
                summary.frames,
                summary.updates,
                last,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            goals,
            trials,
            out,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = checkpoint_config(&ck)?;
            let params = load_params(&ck, LEARNER_PARAMS)?;
            let goal_set = GoalSet::load(&goals)?;
            let net = cfg.net();
            let mut policy = GreedyPolicy::new(&net, &params);
            let mut report = evaluate(
                &mut policy,
                &cfg.env,
                &goal_set,
                trials,
                cfg.episode_length,
                seed.unwrap_or(cfg.seed),
            )?;
            let frames = ck.u64s("session.counters")?.first().copied().unwrap_or(0);
            report.frames = frames;
            let row = MetricsRow {
                frames,
                wall_seconds: 0.0,
                td_loss: f64::NAN,
                disc_loss: f64::NAN,
                mean_reward: f64::NAN,
                achievement_overall: report.overall(),
                achievement_dims: report.dim_fractions(),
            };
            fs::write(&out, write_metrics_csv(&[row])?)?;
            println!("achievement {:.4} dims {:?}", report.overall(), report.dim_fractions());
        }
        Command::DumpGoals { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = checkpoint_config(&ck)?;
            let buf = load_goal_buffer(&ck, cfg.goal_buffer.clone())?;
            let file = fs::File::create(&out)?;
            buf.write_dump(std::io::BufWriter::new(file))?;
            println!("{} goals -> {}", buf.len(), out.display());
        }
        Command::MakeGoals { config, n, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let set = GoalSet::build(&cfg.env, n, seed)?;
            set.save(&out)?;
            println!("{} goals -> {}", set.len(), out.display());
        }
        Command::Report { runs, out } => {
            let mut series = Vec::with_capacity(runs.len());
            for dir in &runs {
                let path = dir.join("metrics.csv");
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let rows: Vec<MetricsRow> = parse_metrics_csv(&text)?;
                series.push((series_name(dir), rows));
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("curves.svg"), learning_curve_svg(&series)?)?;
            for (name, rows) in &series {
                emit_report(name, rows, &out.join(name))?;
            }
            println!("{} runs -> {}", series.len(), out.display());
        }
    }
    Ok(())
}
