//! Function approximators shared by the policy and the reward learner.
//!
//! * encoder `h(·)`: flattened observation → two ReLU layers → `features` linear units.
//!   The same weights encode states and goals.
//! * embedding `ξ(·)`: one `tanh` layer followed by L2 normalization.
//! * time features: `(sin 2πt/T, cos 2πt/T)` through one ReLU layer.
//! * trunk: a GRU cell over `[h(s_t), h(s_g), time]`, reset at every goal episode.
//! * head: dueling, `Q(a|ψ) = ψᵀv + (ψᵀw_a − mean_a' ψᵀw_a') + b`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::StandardNormal;

use crate::env::{Observation, N_ACTIONS};
use crate::math::{Axis, Graph, MathError, NodeId, Tensor};

pub type Params = BTreeMap<String, Arc<Tensor>>;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("time step {t} outside 1..={horizon}")]
    TimeStep { t: usize, horizon: usize },
    #[error("observation has {got} values, network expects {expected}")]
    ObsShape { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub obs_len: usize,
    pub encoder_hidden: usize,
    pub features: usize,
    pub time_hidden: usize,
    pub recurrent: usize,
    pub embedding: usize,
    pub actions: usize,
}

impl NetConfig {
    pub fn new(obs_len: usize) -> Self {
        Self {
            obs_len,
            encoder_hidden: 128,
            features: 64,
            time_hidden: 16,
            recurrent: 128,
            embedding: 32,
            actions: N_ACTIONS,
        }
    }

    fn trunk_input(&self) -> usize {
        2 * self.features + self.time_hidden
    }
}

/// All learnable parameters: the policy `theta` (encoder, trunk, head) and the
/// reward embedding `phi` (plus the decoder when the autoencoder baseline is used).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub theta: Params,
    pub phi: Params,
}

/// Truncated normal (±2σ) with σ = 1/√fan_in.
fn weight(rng: &mut impl rand::Rng, fan_in: usize, fan_out: usize) -> Arc<Tensor> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Arc::new(Tensor::from_rows(fan_in, fan_out, data))
}

fn bias(n: usize) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(&[1, n]))
}

impl ParamSet {
    pub fn init(cfg: &NetConfig, with_decoder: bool, rng: &mut impl rand::Rng) -> Self {
        let (hid, f, r) = (cfg.encoder_hidden, cfg.features, cfg.recurrent);
        let mut theta = Params::new();
        theta.insert("enc.w0".into(), weight(rng, cfg.obs_len, hid));
        theta.insert("enc.b0".into(), bias(hid));
        theta.insert("enc.w1".into(), weight(rng, hid, hid));
        theta.insert("enc.b1".into(), bias(hid));
        theta.insert("enc.w2".into(), weight(rng, hid, f));
        theta.insert("enc.b2".into(), bias(f));
        theta.insert("time.w".into(), weight(rng, 2, cfg.time_hidden));
        theta.insert("time.b".into(), bias(cfg.time_hidden));
        theta.insert("gru.wx".into(), weight(rng, cfg.trunk_input(), 3 * r));
        theta.insert("gru.bx".into(), bias(3 * r));
        theta.insert("gru.wh".into(), weight(rng, r, 3 * r));
        theta.insert("gru.bh".into(), bias(3 * r));
        theta.insert("head.v".into(), weight(rng, r, 1));
        theta.insert("head.w".into(), weight(rng, r, cfg.actions));
        theta.insert("head.b".into(), bias(1));

        let mut phi = Params::new();
        phi.insert("emb.w".into(), weight(rng, f, cfg.embedding));
        phi.insert("emb.b".into(), bias(cfg.embedding));
        if with_decoder {
            phi.insert("dec.w".into(), weight(rng, cfg.embedding, f));
            phi.insert("dec.b".into(), bias(f));
        }
        Self { theta, phi }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.theta.get(name).or_else(|| self.phi.get(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.theta.iter().chain(self.phi.iter())
    }
}

/// `(sin(2πt/T), cos(2πt/T))` for `1 ≤ t ≤ T`.
pub fn time_features(t: usize, horizon: usize) -> Result<[f64; 2], NetError> {
    if t == 0 || t > horizon {
        return Err(NetError::TimeStep { t, horizon });
    }
    let angle = 2.0 * PI * t as f64 / horizon as f64;
    Ok([angle.sin(), angle.cos()])
}

/// Stacks observations as rows of a `[n, obs_len]` matrix.
pub fn obs_matrix<'o>(obs: impl IntoIterator<Item = &'o Observation>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for o in obs {
        data.extend_from_slice(o.data());
        rows += 1;
    }
    let cols = data.len() / rows.max(1);
    Tensor::from_rows(rows, cols, data)
}

/// Binds a [`ParamSet`] into graphs, choosing which group is differentiated.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a ParamSet,
    pub train_theta: bool,
    pub train_phi: bool,
}

impl<'a> Net<'a> {
    pub fn frozen(cfg: &'a NetConfig, params: &'a ParamSet) -> Self {
        Self {
            cfg,
            params,
            train_theta: false,
            train_phi: false,
        }
    }

    fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId, NetError> {
        let (value, trainable) = match self.params.theta.get(name) {
            Some(v) => (v, self.train_theta),
            None => (
                self.params
                    .phi
                    .get(name)
                    .ok_or_else(|| NetError::MissingParam(name.into()))?,
                self.train_phi,
            ),
        };
        Ok(if trainable {
            g.param(name, value)
        } else {
            g.frozen_param(name, value)
        })
    }

    fn affine(&self, g: &mut Graph, x: NodeId, w: &str, b: &str) -> Result<NodeId, NetError> {
        let w = self.bind(g, w)?;
        let b = self.bind(g, b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    /// `h(s)` for every row of `obs` (`[n, obs_len]` → `[n, features]`).
    pub fn encode(&self, g: &mut Graph, obs: NodeId) -> Result<NodeId, NetError> {
        let cols = g.value(obs).cols();
        if cols != self.cfg.obs_len {
            return Err(NetError::ObsShape {
                expected: self.cfg.obs_len,
                got: cols,
            });
        }
        let x = self.affine(g, obs, "enc.w0", "enc.b0")?;
        let x = g.relu(x);
        let x = self.affine(g, x, "enc.w1", "enc.b1")?;
        let x = g.relu(x);
        self.affine(g, x, "enc.w2", "enc.b2")
    }

    /// Hidden ReLU layer over `[n, 2]` periodic time features.
    pub fn time_hidden(&self, g: &mut Graph, tf: NodeId) -> Result<NodeId, NetError> {
        let x = self.affine(g, tf, "time.w", "time.b")?;
        Ok(g.relu(x))
    }

    /// One GRU step; returns the next hidden state ψ.
    pub fn gru(&self, g: &mut Graph, x: NodeId, h: NodeId) -> Result<NodeId, NetError> {
        let r = self.cfg.recurrent;
        let gx = self.affine(g, x, "gru.wx", "gru.bx")?;
        let gh = self.affine(g, h, "gru.wh", "gru.bh")?;
        let (xz, xr, xn) = (g.slice_cols(gx, 0, r)?, g.slice_cols(gx, r, r)?, g.slice_cols(gx, 2 * r, r)?);
        let (hz, hr, hn) = (g.slice_cols(gh, 0, r)?, g.slice_cols(gh, r, r)?, g.slice_cols(gh, 2 * r, r)?);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let reset = g.add(xr, hr)?;
        let reset = g.sigmoid(reset);
        let rn = g.mul(reset, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        Ok(g.add(n, zd)?)
    }

    /// Dueling Q head over `[n, recurrent]` trunk outputs → `[n, actions]`.
    pub fn dueling(&self, g: &mut Graph, psi: NodeId) -> Result<NodeId, NetError> {
        let v = self.bind(g, "head.v")?;
        let w = self.bind(g, "head.w")?;
        let b = self.bind(g, "head.b")?;
        let value = g.matmul(psi, v)?;
        let adv = g.matmul(psi, w)?;
        let adv_sum = g.sum_cols(adv);
        let adv_mean = g.scale(adv_sum, 1.0 / self.cfg.actions as f64);
        let centered = g.sub(adv, adv_mean)?;
        let q = g.add(centered, value)?;
        Ok(g.add(q, b)?)
    }

    /// One recurrent step of the goal-conditioned Q function.
    pub fn q_step(
        &self,
        g: &mut Graph,
        state_feats: NodeId,
        goal_feats: NodeId,
        time_hidden: NodeId,
        recurrent: NodeId,
    ) -> Result<(NodeId, NodeId), NetError> {
        let x = g.concat(&[state_feats, goal_feats, time_hidden], Axis::Cols)?;
        let psi = self.gru(g, x, recurrent)?;
        let q = self.dueling(g, psi)?;
        Ok((q, psi))
    }

    /// Unit-norm embedding `ξ(h)`.
    pub fn embed(&self, g: &mut Graph, feats: NodeId) -> Result<NodeId, NetError> {
        let x = self.affine(g, feats, "emb.w", "emb.b")?;
        let x = g.tanh(x);
        Ok(g.l2_normalize(x))
    }

    /// Autoencoder-baseline inverse mapping `ξ⁻¹(e)`.
    pub fn decode(&self, g: &mut Graph, emb: NodeId) -> Result<NodeId, NetError> {
        self.affine(g, emb, "dec.w", "dec.b")
    }
}

/// Plain-value inference helpers for acting and evaluation.
pub struct Inference<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a ParamSet,
}

impl<'a> Inference<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a ParamSet) -> Self {
        Self { cfg, params }
    }

    fn net(&self) -> Net<'a> {
        Net::frozen(self.cfg, self.params)
    }

    /// `h(s)` for a batch of observations (`[n, features]`).
    pub fn encode(&self, obs: Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let x = g.input(obs);
        let h = self.net().encode(&mut g, x)?;
        Ok(g.value(h).clone())
    }

    pub fn embed(&self, feats: Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let x = g.input(feats);
        let e = self.net().embed(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    pub fn initial_state(&self, rows: usize) -> Tensor {
        Tensor::zeros(&[rows, self.cfg.recurrent])
    }

    /// Q values and next recurrent state for step `t` of a `horizon`-step episode.
    /// Every row shares the same time step.
    pub fn q_values(
        &self,
        state_feats: Tensor,
        goal_feats: Tensor,
        t: usize,
        horizon: usize,
        recurrent: Tensor,
    ) -> Result<(Tensor, Tensor), NetError> {
        let rows = state_feats.rows();
        let [s, c] = time_features(t, horizon)?;
        let tf: Vec<f64> = std::iter::repeat_n([s, c], rows).flatten().collect();
        let mut g = Graph::new();
        let net = self.net();
        let hs = g.input(state_feats);
        let hg = g.input(goal_feats);
        let tf = g.input(Tensor::from_rows(rows, 2, tf));
        let th = net.time_hidden(&mut g, tf)?;
        let h = g.input(recurrent);
        let (q, psi) = net.q_step(&mut g, hs, hg, th, h)?;
        Ok((g.value(q).clone(), g.value(psi).clone()))
    }
}
