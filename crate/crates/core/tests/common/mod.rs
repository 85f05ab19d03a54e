//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use discern::agent::{discounts, peng_q_lambda_targets, td_loss, unroll_q, GoalEpisode};
use discern::env::Observation;
use discern::math::{Axis, Graph, NodeId, Tensor};
use discern::nets::{obs_matrix, Net, NetConfig, ParamSet, Params};
use discern::reward::discriminator_loss;
use discern::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this absolute gap two derivatives agree regardless of their size;
/// central differences cannot resolve anything finer at this step.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn gradients_agree(analytic: f64, numeric: f64) -> bool {
    let gap = (analytic - numeric).abs();
    gap <= FD_ABS_FLOOR || gap <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

pub fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    normal(rng, rows, cols).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

/// A differentiable op under test: its inputs and how to apply it.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub const OPS: [&str; 24] = [
    "matmul",
    "add",
    "add_broadcast",
    "sub",
    "sub_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "square",
    "tanh",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "sum_cols",
    "l2_normalize",
    "concat_rows",
    "concat_cols",
    "slice_rows_cols",
    "pick",
];

pub fn op_case(name: &str, rng: &mut Rng) -> OpCase {
    let r = rng.random_range(1..5);
    let c = rng.random_range(1..6);
    let k = rng.random_range(1..5);
    let unary = |t: Tensor, f: fn(&mut Graph, NodeId) -> NodeId| OpCase {
        inputs: vec![t],
        build: Box::new(move |g, x| f(g, x[0])),
    };
    match name {
        "matmul" => OpCase {
            inputs: vec![normal(rng, r, k), normal(rng, k, c)],
            build: Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        },
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            OpCase {
                inputs: vec![normal(rng, r, c), normal(rng, r, c)],
                build: Box::new(move |g, x| binary(g, &op, x[0], x[1])),
            }
        }
        "add_broadcast" | "sub_broadcast" | "mul_broadcast" => {
            let op = name.trim_end_matches("_broadcast").to_string();
            // Row vector, column vector or scalar on the right-hand side.
            let rhs = match rng.random_range(0..3) {
                0 => normal(rng, 1, c),
                1 => normal(rng, r, 1),
                _ => normal(rng, 1, 1),
            };
            OpCase {
                inputs: vec![normal(rng, r, c), rhs],
                build: Box::new(move |g, x| binary(g, &op, x[0], x[1])),
            }
        }
        "scale" => {
            let f: f64 = rng.random_range(-3.0..3.0);
            OpCase {
                inputs: vec![normal(rng, r, c)],
                build: Box::new(move |g, x| g.scale(x[0], f)),
            }
        }
        "square" => unary(normal(rng, r, c), Graph::square),
        "tanh" => unary(normal(rng, r, c), Graph::tanh),
        "relu" => unary(away_from_zero(rng, r, c, 1e-2), Graph::relu),
        "sigmoid" => unary(normal(rng, r, c), Graph::sigmoid),
        "exp" => unary(normal(rng, r, c), Graph::exp),
        "log" => unary(uniform(rng, r, c, 0.2, 3.0), Graph::log),
        "softmax" => unary(normal(rng, r, c), Graph::softmax),
        "log_softmax" => unary(normal(rng, r, c), Graph::log_softmax),
        "sum" => unary(normal(rng, r, c), Graph::sum),
        "mean" => unary(normal(rng, r, c), Graph::mean),
        "sum_cols" => unary(normal(rng, r, c), Graph::sum_cols),
        "l2_normalize" => unary(away_from_zero(rng, r, c.max(2), 0.1), Graph::l2_normalize),
        "concat_rows" => OpCase {
            inputs: vec![normal(rng, r, c), normal(rng, k, c)],
            build: Box::new(|g, x| g.concat(x, Axis::Rows).unwrap()),
        },
        "concat_cols" => OpCase {
            inputs: vec![normal(rng, r, c), normal(rng, r, k)],
            build: Box::new(|g, x| g.concat(x, Axis::Cols).unwrap()),
        },
        "slice_rows_cols" => {
            let (rows, cols) = (r + 2, c + 2);
            let (r0, c0) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let (rl, cl) = (rng.random_range(1..=rows - r0), rng.random_range(1..=cols - c0));
            OpCase {
                inputs: vec![normal(rng, rows, cols)],
                build: Box::new(move |g, x| {
                    let s = g.slice_rows(x[0], r0, rl).unwrap();
                    g.slice_cols(s, c0, cl).unwrap()
                }),
            }
        }
        "pick" => {
            let index: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            OpCase {
                inputs: vec![normal(rng, r, c)],
                build: Box::new(move |g, x| g.pick(x[0], &index).unwrap()),
            }
        }
        other => panic!("no gradient case for `{other}`"),
    }
}

fn binary(g: &mut Graph, op: &str, a: NodeId, b: NodeId) -> NodeId {
    match op {
        "add" => g.add(a, b),
        "sub" => g.sub(a, b),
        _ => g.mul(a, b),
    }
    .unwrap()
}

/// Scalar probe `Σ w ⊙ op(x)` and its gradients with respect to every input.
fn probe(case: &OpCase, inputs: &[Tensor], weights: &mut Option<Tensor>, rng: &mut Rng) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let shared: Vec<Arc<Tensor>> = inputs.iter().cloned().map(Arc::new).collect();
    let ids: Vec<NodeId> = shared
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("x{i}"), t))
        .collect();
    let out = (case.build)(&mut g, &ids);
    let (rows, cols) = (g.value(out).rows(), g.value(out).cols());
    let w = weights.get_or_insert_with(|| normal(rng, rows, cols)).clone();
    let w = g.input(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item().unwrap();
    let grads = g.backward(loss).unwrap();
    (value, (0..inputs.len()).map(|i| grads[&format!("x{i}")].clone()).collect())
}

#[derive(Debug, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl CheckStats {
    fn record(&mut self, label: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let gap = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if gap > FD_ABS_FLOOR && scale > 0.0 {
            self.worst_rel = self.worst_rel.max(gap / scale);
        }
        if !gradients_agree(analytic, numeric) {
            self.failures.push(format!("{label}: analytic {analytic:.8e}, numeric {numeric:.8e}"));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Finite-difference check of one op on `instances` random inputs.
pub fn check_op(name: &str, instances: usize, seed: u64) -> CheckStats {
    let mut stats = CheckStats::default();
    let mut rng = rng::stream(seed, "gradcheck-op", 0);
    for inst in 0..instances {
        let case = op_case(name, &mut rng);
        let mut weights = None;
        let (_, analytic) = probe(&case, &case.inputs, &mut weights, &mut rng);
        for (i, input) in case.inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut plus = case.inputs.clone();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = case.inputs.clone();
                minus[i].data_mut()[j] -= FD_STEP;
                let (fp, _) = probe(&case, &plus, &mut weights, &mut rng);
                let (fm, _) = probe(&case, &minus, &mut weights, &mut rng);
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                stats.record(&format!("{name}[{inst}] x{i}[{j}]"), analytic[i].data()[j], numeric);
            }
        }
    }
    stats
}

pub fn tiny_net(seed: u64) -> (NetConfig, ParamSet) {
    let mut cfg = NetConfig::new(12);
    cfg.encoder_hidden = 6;
    cfg.features = 4;
    cfg.time_hidden = 3;
    cfg.recurrent = 5;
    cfg.embedding = 3;
    let params = ParamSet::init(&cfg, false, &mut rng::stream(seed, "tiny-net", 0));
    (cfg, params)
}

pub fn random_obs(rng: &mut Rng) -> Observation {
    Observation::new(2, 2, (0..12).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn random_episode(rng: &mut Rng, horizon: usize, actions: usize) -> GoalEpisode {
    let mut rewards = vec![0.0; horizon];
    rewards[horizon - 1] = rng.random();
    GoalEpisode {
        goal: random_obs(rng),
        observations: (0..=horizon).map(|_| random_obs(rng)).collect(),
        actions: (0..horizon).map(|_| rng.random_range(0..actions)).collect(),
        rewards,
        relabelled: false,
    }
}

/// Biases start at zero; give them values so their gradients are exercised
/// away from the initial point.
fn jitter(params: &mut Params, rng: &mut Rng) {
    for t in params.values_mut() {
        let mut v = (**t).clone();
        for x in v.data_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        *t = Arc::new(v);
    }
}

fn perturbed(params: &ParamSet, name: &str, j: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    let set = if p.theta.contains_key(name) { &mut p.theta } else { &mut p.phi };
    let mut t = (*set[name]).clone();
    t.data_mut()[j] += delta;
    set.insert(name.into(), Arc::new(t));
    p
}

/// Checks `loss` against central differences on up to `per_tensor` entries of
/// every parameter in `names`.
fn check_params(
    stats: &mut CheckStats,
    label: &str,
    params: &ParamSet,
    names: &[String],
    per_tensor: usize,
    rng: &mut Rng,
    loss: &dyn Fn(&ParamSet, bool) -> (f64, Option<discern::math::Gradients>),
) {
    let (_, grads) = loss(params, true);
    let grads = grads.expect("gradients requested");
    for name in names {
        let n = params.get(name).unwrap().numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let (fp, _) = loss(&perturbed(params, name, j, FD_STEP), false);
            let (fm, _) = loss(&perturbed(params, name, j, -FD_STEP), false);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            stats.record(&format!("{label} {name}[{j}]"), grads[name].data()[j], numeric);
        }
    }
}

/// Discriminator loss gradients with respect to φ on a tiny network, plus a
/// check that θ receives exactly zero gradient.
pub fn check_discriminator(instances: usize, seed: u64) -> CheckStats {
    let mut stats = CheckStats::default();
    let mut rng = rng::stream(seed, "gradcheck-disc", 0);
    for inst in 0..instances {
        let (cfg, mut params) = tiny_net(seed + inst as u64);
        jitter(&mut params.phi, &mut rng);
        let b = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let beta = (k + 1) as f64;
        let finals: Vec<Observation> = (0..b).map(|_| random_obs(&mut rng)).collect();
        let goals: Vec<Observation> = (0..b).map(|_| random_obs(&mut rng)).collect();
        let decoys: Vec<Observation> = (0..b * k).map(|_| random_obs(&mut rng)).collect();
        let loss = |p: &ParamSet, want: bool| {
            let mut g = Graph::new();
            let net = Net {
                cfg: &cfg,
                params: p,
                train_theta: true,
                train_phi: true,
            };
            let s = g.input(obs_matrix(&finals));
            let t = g.input(obs_matrix(&goals));
            let d = g.input(obs_matrix(&decoys));
            let hs = net.encode(&mut g, s).unwrap();
            let hg = net.encode(&mut g, t).unwrap();
            let hd = net.encode(&mut g, d).unwrap();
            let l = discriminator_loss(&mut g, &net, hs, hg, hd, beta).unwrap();
            let v = g.value(l).item().unwrap();
            (v, want.then(|| g.backward(l).unwrap()))
        };
        let names: Vec<String> = params.phi.keys().cloned().collect();
        check_params(&mut stats, &format!("disc[{inst}]"), &params, &names, 6, &mut rng, &loss);
        let grads = loss(&params, true).1.unwrap();
        for name in params.theta.keys() {
            if grads.get(name).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                stats.failures.push(format!("disc[{inst}]: encoder parameter {name} received gradient"));
            }
        }
    }
    stats
}

/// TD-loss gradients with respect to θ on a tiny network. With `gamma = 0`
/// the targets are the rewards and the full loss is checked; otherwise the
/// targets are frozen at their value for the unperturbed parameters.
pub fn check_td(instances: usize, seed: u64, gamma: f64, lambda: f64) -> CheckStats {
    let mut stats = CheckStats::default();
    let mut rng = rng::stream(seed, "gradcheck-td", 0);
    for inst in 0..instances {
        let (cfg, mut params) = tiny_net(seed + 100 + inst as u64);
        jitter(&mut params.theta, &mut rng);
        let b = rng.random_range(1..4);
        let horizon = rng.random_range(2..5);
        let batch: Vec<GoalEpisode> = (0..b)
            .map(|_| random_episode(&mut rng, horizon, cfg.actions))
            .collect();
        let refs: Vec<&GoalEpisode> = batch.iter().collect();
        let frozen_targets = (gamma != 0.0).then(|| frozen_td_targets(&cfg, &params, &refs, gamma, lambda));
        let loss = |p: &ParamSet, want: bool| {
            let mut g = Graph::new();
            let net = Net {
                cfg: &cfg,
                params: p,
                train_theta: true,
                train_phi: false,
            };
            let l = match &frozen_targets {
                None => td_loss(&mut g, &net, &refs, gamma, lambda).unwrap(),
                Some(targets) => {
                    let q = unroll_q(&mut g, &net, &refs).unwrap();
                    let index: Vec<usize> = (0..horizon)
                        .flat_map(|t| refs.iter().map(move |ep| ep.actions[t]))
                        .collect();
                    let picked = g.pick(q, &index).unwrap();
                    let y = g.input(Tensor::from_rows(targets.len(), 1, targets.clone()));
                    let err = g.sub(picked, y).unwrap();
                    let sq = g.square(err);
                    g.mean(sq)
                }
            };
            let v = g.value(l).item().unwrap();
            (v, want.then(|| g.backward(l).unwrap()))
        };
        let names: Vec<String> = params.theta.keys().cloned().collect();
        check_params(&mut stats, &format!("td[{inst}]"), &params, &names, 4, &mut rng, &loss);
    }
    stats
}

fn frozen_td_targets(cfg: &NetConfig, params: &ParamSet, batch: &[&GoalEpisode], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let q = unroll_q(&mut g, &Net::frozen(cfg, params), batch).unwrap();
    let q = g.value(q).clone();
    let (b, horizon) = (batch.len(), batch[0].len());
    let disc = discounts(horizon, gamma);
    let mut out = vec![0.0; horizon * b];
    for (j, ep) in batch.iter().enumerate() {
        let rows: Vec<f64> = (0..horizon).flat_map(|t| q.row_slice(t * b + j).to_vec()).collect();
        let targets = peng_q_lambda_targets(&ep.rewards, &disc, &Tensor::from_rows(horizon, cfg.actions, rows), lambda).unwrap();
        for (t, v) in targets.into_iter().enumerate() {
            out[t * b + j] = v;
        }
    }
    out
}

/// Peng's Q(λ) return expanded as an explicit mixture of n-step returns:
/// `(1−λ) Σ_{n<m} λ^{n−1} G^(n) + λ^{m−1} G^(m)` with `m` steps to the end of
/// the episode and no bootstrap past the last step.
pub fn brute_force_q_lambda(rewards: &[f64], discounts: &[f64], q: &[Vec<f64>], lambda: f64) -> Vec<f64> {
    let horizon = rewards.len();
    let max_q = |t: usize| -> f64 {
        if t >= horizon {
            0.0
        } else {
            q[t].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    };
    (0..horizon)
        .map(|t| {
            let m = horizon - t;
            let n_step = |n: usize| -> f64 {
                let mut ret = 0.0;
                let mut scale = 1.0;
                for k in 0..n {
                    ret += scale * rewards[t + k];
                    scale *= discounts[t + k];
                }
                ret + scale * max_q(t + n)
            };
            let mut total = lambda.powi(m as i32 - 1) * n_step(m);
            for n in 1..m {
                total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
            }
            total
        })
        .collect()
}

/// Largest gap between the recursive targets and the brute-force mixture over
/// `episodes` random episodes of length 1..=8 for each λ.
pub fn q_lambda_max_gap(episodes: usize, lambdas: &[f64], seed: u64) -> f64 {
    let mut rng = rng::stream(seed, "q-lambda-oracle", 0);
    let mut worst: f64 = 0.0;
    for &lambda in lambdas {
        for e in 0..episodes {
            let horizon = rng.random_range(1..=8);
            let n = rng.random_range(1..6);
            let rewards: Vec<f64> = (0..horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Alternate between the agent's own discount pattern and arbitrary discounts.
            let discounts: Vec<f64> = if e % 2 == 0 {
                discounts(horizon, rng.random_range(0.0..1.0))
            } else {
                (0..horizon).map(|_| rng.random_range(0.0..1.0)).collect()
            };
            let q: Vec<Vec<f64>> = (0..horizon)
                .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let q_t = Tensor::from_rows(horizon, n, q.concat());
            let fast = peng_q_lambda_targets(&rewards, &discounts, &q_t, lambda).unwrap();
            let slow = brute_force_q_lambda(&rewards, &discounts, &q, lambda);
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Exact no-op achievement on a `w × h` grid: the avatar never moves, so the
/// outcome is decided by the (uniform) start. Enumerates every start/goal pair.
pub fn noop_achievement_exact(w: usize, h: usize, tolerance: f64) -> (f64, [f64; 2]) {
    let (rx, ry) = ((w - 1) as f64, (h - 1) as f64);
    let (mut both, mut dx, mut dy, mut total) = (0u64, 0u64, 0u64, 0u64);
    for sx in 0..w {
        for sy in 0..h {
            for gx in 0..w {
                for gy in 0..h {
                    let hx = (sx as f64 - gx as f64).abs() <= tolerance * rx;
                    let hy = (sy as f64 - gy as f64).abs() <= tolerance * ry;
                    total += 1;
                    dx += u64::from(hx);
                    dy += u64::from(hy);
                    both += u64::from(hx && hy);
                }
            }
        }
    }
    let t = total as f64;
    (both as f64 / t, [dx as f64 / t, dy as f64 / t])
}

/// Replacement counts of a full uniform buffer over `proposals` proposals.
pub struct UniformReplacement {
    pub replacements: u64,
    pub per_slot: Vec<u64>,
    pub expected: f64,
    pub sigma: f64,
}

impl UniformReplacement {
    pub fn z(&self) -> f64 {
        (self.replacements as f64 - self.expected) / self.sigma
    }

    /// Pearson statistic of the per-slot counts against a uniform split.
    pub fn slot_chi2(&self) -> f64 {
        let e = self.replacements as f64 / self.per_slot.len() as f64;
        self.per_slot.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
    }
}

pub fn uniform_replacement(capacity: usize, p_replace: f64, proposals: u64, seed: u64) -> UniformReplacement {
    use discern::goalbuf::{GoalBuffer, GoalBufferConfig, Strategy, Substitution};
    let config = GoalBufferConfig {
        capacity,
        strategy: Strategy::Uniform,
        p_replace,
        ..GoalBufferConfig::default()
    };
    let mut buf = GoalBuffer::new(config, seed);
    let mut rng = rng::stream(seed, "uniform-proposals", 0);
    let tiny = |rng: &mut Rng| Observation::new(1, 1, vec![rng.random(), 0.0, 0.0]).unwrap();
    while !buf.is_full() {
        buf.propose(&tiny(&mut rng));
    }
    let obs = tiny(&mut rng);
    let mut per_slot = vec![0u64; capacity];
    let mut replacements = 0;
    for _ in 0..proposals {
        if let Substitution::Replaced { slot, .. } = buf.propose(&obs) {
            per_slot[slot] += 1;
            replacements += 1;
        }
    }
    let n = proposals as f64;
    UniformReplacement {
        replacements,
        per_slot,
        expected: n * p_replace,
        sigma: (n * p_replace * (1.0 - p_replace)).sqrt(),
    }
}

/// Mean distance from `x` to every slot but `skip`, computed from raw pixels.
fn mean_distance_independent(slots: &[Observation], x: &Observation, skip: usize) -> f64 {
    let mut total = 0.0;
    for (i, s) in slots.iter().enumerate() {
        if i != skip {
            let d2: f64 = s.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum();
            total += d2.sqrt();
        }
    }
    total / (slots.len() - 1) as f64
}

/// Runs a diverse buffer with `p_add_non_diverse = 0` over observations from a
/// random-walk grid world. Returns (swaps accepted, swaps that lowered the
/// slot's mean distance to the rest).
pub fn diverse_swaps(capacity: usize, p_replace: f64, proposals: usize, seed: u64) -> (u64, u64) {
    use discern::env::{GridWorld, GridWorldConfig};
    use discern::goalbuf::{GoalBuffer, GoalBufferConfig, Strategy, Substitution};
    let config = GoalBufferConfig {
        capacity,
        strategy: Strategy::Diverse,
        p_replace,
        p_add_non_diverse: 0.0,
        warmup: 1,
    };
    let mut buf = GoalBuffer::new(config, seed);
    let (mut env, _) = GridWorld::reset(&GridWorldConfig::default(), seed).unwrap();
    let mut rng = rng::stream(seed, "diverse-walk", 0);
    let (mut accepted, mut bad) = (0, 0);
    for _ in 0..proposals {
        let obs = env.step(rng.random_range(0..5)).unwrap();
        let before: Vec<Observation> = buf.slots().to_vec();
        if let Substitution::Replaced { slot, .. } = buf.propose(&obs) {
            accepted += 1;
            let old = mean_distance_independent(&before, &before[slot], slot);
            let new = mean_distance_independent(&before, &obs, slot);
            if new < old {
                bad += 1;
            }
        }
    }
    (accepted, bad)
}

/// No-op policy achievement on the default grid, measured by the harness.
pub fn noop_achievement(goals: usize, trials: usize, seed: u64) -> discern::eval::AchievementReport {
    use discern::env::GridWorldConfig;
    use discern::eval::{evaluate, GoalSet, NoOpPolicy};
    let env = GridWorldConfig::default();
    let set = GoalSet::build(&env, goals, rng::derive_seed(seed, "eval-goals", 0)).unwrap();
    evaluate(&mut NoOpPolicy, &env, &set, trials, 50, seed).unwrap()
}

/// A configuration small enough to train for a few thousand frames in seconds.
pub fn small_config() -> discern::runtime::ExperimentConfig {
    let mut c = discern::runtime::ExperimentConfig::default();
    c.env.width = 4;
    c.env.height = 4;
    c.episode_length = 10;
    c.batch_size = 4;
    c.goal_buffer.capacity = 64;
    c.goal_buffer.warmup = 16;
    c.goal_buffer.p_replace = 0.05;
    c.encoder_hidden = 16;
    c.features = 8;
    c.time_hidden = 4;
    c.recurrent = 12;
    c.embedding = 6;
    c.actors = 1;
    c.total_frames = 6_000;
    c.eval_every = 2_000;
    c.eval_goals = 10;
    c.eval_trials = 4;
    c.replay_capacity = 32;
    c.broadcast_every = 2;
    c.wall_clock = false;
    c
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Each protocol invariant with its outcome.
pub fn protocol_invariants(seed: u64) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("beta = K + 1 = 5 with K = 4", beta_default()),
        ("discriminator probabilities sum to 1", probs_sum_to_one(seed)),
        ("rewards lie in [0, 1]", rewards_in_unit_interval(seed)),
        ("relabelled episodes carry r_T = 1", relabelled_reward(seed)),
        ("embedding update leaves encoder bit-unchanged", encoder_untouched(seed)),
        ("embeddings have unit norm", unit_embeddings(seed)),
    ]
}

fn beta_default() -> Result<(), String> {
    let c = discern::runtime::ExperimentConfig::default();
    require(c.decoys == 4 && c.beta() == 5.0, || format!("K = {}, beta = {}", c.decoys, c.beta()))
}

fn probs_sum_to_one(seed: u64) -> Result<(), String> {
    use discern::reward::discriminator_probs;
    let mut rng = rng::stream(seed, "probs", 0);
    for i in 0..50 {
        let (cfg, params) = tiny_net(seed + i);
        let b = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let net = Net::frozen(&cfg, &params);
        let p = discriminator_probs(
            &net,
            normal(&mut rng, b, cfg.features),
            normal(&mut rng, b, cfg.features),
            normal(&mut rng, b * k, cfg.features),
            (k + 1) as f64,
        )
        .map_err(|e| e.to_string())?;
        for r in 0..b {
            let s: f64 = p.row_slice(r).iter().sum();
            require((s - 1.0).abs() <= 1e-12, || format!("row sums to {s}"))?;
        }
    }
    Ok(())
}

fn rewards_in_unit_interval(seed: u64) -> Result<(), String> {
    use discern::nets::Inference;
    use discern::reward::{RewardKind, RewardModel};
    let mut rng = rng::stream(seed, "rewards", 0);
    for i in 0..50 {
        let (cfg, params) = tiny_net(seed + i);
        let inf = Inference::new(&cfg, &params);
        for kind in [RewardKind::Discern, RewardKind::AutoEncoder, RewardKind::PixelL2, RewardKind::Disabled] {
            let model = RewardModel { kind, sigma_pixel: rng.random_range(0.1..10.0) };
            let (s, g) = (random_obs(&mut rng), random_obs(&mut rng));
            let r = model.reward(&inf, &s, &g, None).map_err(|e| e.to_string())?;
            require((0.0..=1.0).contains(&r), || format!("{kind} reward {r}"))?;
        }
    }
    Ok(())
}

fn relabelled_reward(seed: u64) -> Result<(), String> {
    use discern::goalbuf::GoalBuffer;
    use discern::runtime::{Actor, Learner};
    use std::sync::Mutex;
    let mut cfg = small_config();
    cfg.seed = seed;
    cfg.hindsight.p_her = 1.0;
    let learner = Learner::new(&cfg);
    let mut actor = Actor::new(&cfg, 0, learner.snapshot()).map_err(|e| e.to_string())?;
    let goals = Mutex::new(GoalBuffer::new(cfg.goal_buffer.clone(), seed));
    let mut fresh = 0;
    for _ in 0..20 {
        for t in actor.run(&goals).map_err(|e| e.to_string())? {
            if !t.replay {
                fresh += 1;
                let ep = &t.episode;
                require(ep.relabelled && ep.terminal_reward() == 1.0, || {
                    format!("relabelled {} with r_T {}", ep.relabelled, ep.terminal_reward())
                })?;
                let window = &ep.observations[ep.observations.len() - cfg.hindsight.window..];
                require(window.contains(&ep.goal), || "goal outside the hindsight window".into())?;
            }
        }
    }
    require(fresh > 0, || "no goal episodes were played".into())
}

fn encoder_untouched(seed: u64) -> Result<(), String> {
    use discern::math::{RmsProp, RmsPropConfig};
    use discern::reward::{embedding_update, RewardKind};
    let mut rng = rng::stream(seed, "encoder-untouched", 0);
    for kind in [RewardKind::Discern, RewardKind::AutoEncoder] {
        let (cfg, _) = tiny_net(seed);
        let mut params = ParamSet::init(&cfg, true, &mut rng::stream(seed, "tiny-net", 1));
        let before = params.clone();
        let mut opt = RmsProp::new(RmsPropConfig { learning_rate: 1e-2, ..RmsPropConfig::default() });
        let obs: Vec<Observation> = (0..4 * 6).map(|_| random_obs(&mut rng)).collect();
        let r = |i: usize| -> Vec<&Observation> { obs[i * 4..(i + 1) * 4].iter().collect() };
        let decoys: Vec<&Observation> = obs[8..].iter().collect();
        for _ in 0..3 {
            embedding_update(kind, &cfg, &mut params, &mut opt, &r(0), &r(1), &decoys, 5.0)
                .map_err(|e| e.to_string())?;
        }
        for (name, t) in &before.theta {
            let after = &params.theta[name];
            let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            require(same, || format!("{kind}: encoder parameter {name} changed"))?;
        }
        require(before.phi != params.phi, || format!("{kind}: embedding did not move"))?;
    }
    Ok(())
}

fn unit_embeddings(seed: u64) -> Result<(), String> {
    use discern::nets::Inference;
    let mut rng = rng::stream(seed, "unit-embeddings", 0);
    for i in 0..20 {
        let (cfg, params) = tiny_net(seed + i);
        let e = Inference::new(&cfg, &params)
            .embed(normal(&mut rng, 16, cfg.features))
            .map_err(|e| e.to_string())?;
        for r in 0..e.rows() {
            let n = e.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            require((n - 1.0).abs() <= 1e-10, || format!("norm {n}"))?;
        }
    }
    Ok(())
}
