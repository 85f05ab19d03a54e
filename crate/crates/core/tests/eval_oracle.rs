mod common;

use common::{noop_achievement, noop_achievement_exact};
use discern::env::{Action, GridWorld, GridWorldConfig, Observation};
use discern::eval::{evaluate, GoalPolicy, GoalSet, EvalError, TOLERANCE};

#[test]
fn exact_noop_value_on_eight_by_eight() {
    let (overall, dims) = noop_achievement_exact(8, 8, TOLERANCE);
    assert_eq!(overall, 1.0 / 64.0);
    assert_eq!(dims, [1.0 / 8.0, 1.0 / 8.0]);
}

#[test]
fn noop_harness_matches_enumeration() {
    let (p, dims) = noop_achievement_exact(8, 8, TOLERANCE);
    let report = noop_achievement(100, 20, 1);
    let n = report.total() as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((report.overall() - p).abs() <= 3.0 * sigma, "{} vs {p}", report.overall());
    for (d, want) in dims.into_iter().enumerate() {
        let s = (want * (1.0 - want) / n).sqrt();
        assert!((report.dim(d) - want).abs() <= 3.0 * s);
        assert!(report.overall() <= report.dim(d));
    }
}

/// Walks straight to the goal's recorded avatar position using ground truth.
struct Teleport {
    targets: Vec<[f64; 2]>,
}

impl GoalPolicy for Teleport {
    fn begin(&mut self, _goals: &[&Observation], _horizon: usize) -> Result<(), EvalError> {
        Ok(())
    }

    fn act(&mut self, _t: usize, envs: &[GridWorld], _obs: &[Observation]) -> Result<Vec<usize>, EvalError> {
        Ok(envs
            .iter()
            .zip(&self.targets)
            .map(|(env, g)| {
                let [x, y] = env.controllable_state();
                let a = if x < g[0] {
                    Action::Right
                } else if x > g[0] {
                    Action::Left
                } else if y < g[1] {
                    Action::Down
                } else if y > g[1] {
                    Action::Up
                } else {
                    Action::NoOp
                };
                a as usize
            })
            .collect())
    }
}

#[test]
fn perfect_policy_scores_one() {
    let env = GridWorldConfig::default();
    let goals = GoalSet::build(&env, 10, 4).unwrap();
    let trials = 3;
    let targets = goals
        .entries()
        .iter()
        .flat_map(|e| std::iter::repeat_n([e.truth[0], e.truth[1]], trials))
        .collect();
    let report = evaluate(&mut Teleport { targets }, &env, &goals, trials, 20, 0).unwrap();
    assert_eq!(report.overall(), 1.0);
    assert_eq!(report.dim_fractions(), vec![1.0, 1.0]);
}
