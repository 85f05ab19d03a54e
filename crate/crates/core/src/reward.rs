//! Goal-achievement rewards and the objectives that train them.
//!
//! The learned reward is the rectified cosine similarity between embeddings of
//! the final state and the goal. Its embedding is trained by a softmax
//! discriminator that must pick the true goal out of `K` decoys given the final
//! state. Encoder features enter every objective here behind a stop-gradient.

use std::fmt;
use std::str::FromStr;

use crate::env::Observation;
use crate::math::{Axis, Graph, NodeId, RmsProp, Tensor};
use crate::nets::{obs_matrix, Inference, Net, NetConfig, NetError, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("pixel reward scale must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("discriminator needs at least one decoy")]
    NoDecoys,
    #[error("decoy block has {got} rows, expected {expected}")]
    DecoyShape { expected: usize, got: usize },
    #[error("non-finite embedding loss {0}; update refused")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<crate::math::MathError> for RewardError {
    fn from(e: crate::math::MathError) -> Self {
        Self::Net(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// Embedding trained by decoy discrimination.
    Discern,
    /// Embedding trained as the code of an autoencoder over encoder features.
    AutoEncoder,
    /// `exp(-‖s − g‖² / σ)` in pixel space.
    PixelL2,
    /// No learned reward; only relabelled episodes are rewarded.
    Disabled,
}

impl RewardKind {
    pub fn uses_embedding(self) -> bool {
        matches!(self, Self::Discern | Self::AutoEncoder)
    }
}

impl FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discern" => Ok(Self::Discern),
            "ae" => Ok(Self::AutoEncoder),
            "l2" => Ok(Self::PixelL2),
            "none" => Ok(Self::Disabled),
            other => Err(format!("unknown reward `{other}` (discern, ae, l2, none)")),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Discern => "discern",
            Self::AutoEncoder => "ae",
            Self::PixelL2 => "l2",
            Self::Disabled => "none",
        })
    }
}

/// `ℓ_g`: dot product of two unit embeddings. A zero embedding yields 0.
pub fn goal_similarity(e_s: &[f64], e_g: &[f64]) -> f64 {
    debug_assert_eq!(e_s.len(), e_g.len());
    let degenerate = |e: &[f64]| e.iter().all(|&v| v == 0.0);
    if degenerate(e_s) || degenerate(e_g) {
        log::warn!("zero embedding in goal similarity; reward forced to 0");
        return 0.0;
    }
    e_s.iter().zip(e_g).map(|(a, b)| a * b).sum()
}

/// `max(0, ℓ_g)`, clipped to 1 against rounding.
pub fn achievement_reward(similarity: f64) -> f64 {
    similarity.clamp(0.0, 1.0)
}

pub fn l2_pixel_reward(s: &Observation, g: &Observation, sigma: f64) -> Result<f64, RewardError> {
    if !(sigma > 0.0) {
        return Err(RewardError::InvalidSigma(sigma));
    }
    Ok((-s.squared_distance(g) / sigma).exp())
}

/// Terminal reward of a goal episode under a parameter snapshot.
#[derive(Clone, Copy, Debug)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub sigma_pixel: f64,
}

impl RewardModel {
    /// `goal_embedding` is `ξ(h(g))`; it is ignored by the pixel and disabled kinds.
    pub fn reward(
        &self,
        inference: &Inference<'_>,
        s_final: &Observation,
        goal: &Observation,
        goal_embedding: Option<&[f64]>,
    ) -> Result<f64, RewardError> {
        match self.kind {
            RewardKind::Disabled => Ok(0.0),
            RewardKind::PixelL2 => l2_pixel_reward(s_final, goal, self.sigma_pixel),
            RewardKind::Discern | RewardKind::AutoEncoder => {
                let e_s = embed_observation(inference, s_final)?;
                let e_g = match goal_embedding {
                    Some(e) => e.to_vec(),
                    None => embed_observation(inference, goal)?,
                };
                Ok(achievement_reward(goal_similarity(&e_s, &e_g)))
            }
        }
    }
}

/// `ξ(h(obs))` as a plain vector.
pub fn embed_observation(inference: &Inference<'_>, obs: &Observation) -> Result<Vec<f64>, NetError> {
    let h = inference.encode(crate::nets::obs_matrix([obs]))?;
    Ok(inference.embed(h)?.into_data())
}

fn row_dot(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, RewardError> {
    let p = g.mul(a, b)?;
    Ok(g.sum_cols(p))
}

/// Scaled similarity logits `β·[ℓ_g, ℓ_d1 … ℓ_dK]` as a `[B, K+1]` node.
///
/// `h_final` and `h_goal` are `[B, F]`; `h_decoys` is `[K·B, F]` with decoy `k`
/// of item `b` at row `k·B + b`. All feature inputs are detached.
pub fn discriminator_logits(
    g: &mut Graph,
    net: &Net<'_>,
    h_final: NodeId,
    h_goal: NodeId,
    h_decoys: NodeId,
    beta: f64,
) -> Result<NodeId, RewardError> {
    let b = g.value(h_final).rows();
    let decoy_rows = g.value(h_decoys).rows();
    if decoy_rows == 0 {
        return Err(RewardError::NoDecoys);
    }
    if !decoy_rows.is_multiple_of(b) {
        return Err(RewardError::DecoyShape {
            expected: b * (decoy_rows / b).max(1),
            got: decoy_rows,
        });
    }
    let k = decoy_rows / b;
    let hs = g.stop_gradient(h_final);
    let hg = g.stop_gradient(h_goal);
    let hd = g.stop_gradient(h_decoys);
    let es = net.embed(g, hs)?;
    let eg = net.embed(g, hg)?;
    let ed = net.embed(g, hd)?;
    let mut cols = vec![row_dot(g, es, eg)?];
    for i in 0..k {
        let block = g.slice_rows(ed, i * b, b)?;
        cols.push(row_dot(g, es, block)?);
    }
    let logits = g.concat(&cols, Axis::Cols)?;
    Ok(g.scale(logits, beta))
}

/// `−(1/B) Σ log q̂(g | s_T)`.
pub fn discriminator_loss(
    g: &mut Graph,
    net: &Net<'_>,
    h_final: NodeId,
    h_goal: NodeId,
    h_decoys: NodeId,
    beta: f64,
) -> Result<NodeId, RewardError> {
    let logits = discriminator_logits(g, net, h_final, h_goal, h_decoys, beta)?;
    let logp = g.log_softmax(logits);
    let target = g.slice_cols(logp, 0, 1)?;
    let mean = g.mean(target);
    Ok(g.scale(mean, -1.0))
}

/// Discriminator probabilities `q̂` for plain feature tensors.
pub fn discriminator_probs(
    net: &Net<'_>,
    h_final: Tensor,
    h_goal: Tensor,
    h_decoys: Tensor,
    beta: f64,
) -> Result<Tensor, RewardError> {
    let mut g = Graph::new();
    let (s, t, d) = (g.input(h_final), g.input(h_goal), g.input(h_decoys));
    let logits = discriminator_logits(&mut g, net, s, t, d, beta)?;
    let p = g.softmax(logits);
    Ok(g.value(p).clone())
}

/// Autoencoder baseline: `(1/B) Σ ‖h − ξ⁻¹(ξ(h))‖²` with `h` detached.
pub fn ae_loss(g: &mut Graph, net: &Net<'_>, feats: NodeId) -> Result<NodeId, RewardError> {
    let b = g.value(feats).rows();
    let h = g.stop_gradient(feats);
    let e = net.embed(g, h)?;
    let rec = net.decode(g, e)?;
    let diff = g.sub(h, rec)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// One RMSProp step on φ. `decoys` holds `K` blocks of `B` observations, block
/// `k` carrying decoy `k` of every item. Kinds without a learned embedding
/// return `None` and change nothing.
pub fn embedding_update(
    kind: RewardKind,
    cfg: &NetConfig,
    params: &mut ParamSet,
    optimizer: &mut RmsProp,
    finals: &[&Observation],
    goals: &[&Observation],
    decoys: &[&Observation],
    beta: f64,
) -> Result<Option<f64>, RewardError> {
    if !kind.uses_embedding() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let net = Net {
        cfg,
        params,
        train_theta: false,
        train_phi: true,
    };
    let loss = match kind {
        RewardKind::Discern => {
            let s = g.input(obs_matrix(finals.iter().copied()));
            let t = g.input(obs_matrix(goals.iter().copied()));
            let d = g.input(obs_matrix(decoys.iter().copied()));
            let hs = net.encode(&mut g, s)?;
            let hg = net.encode(&mut g, t)?;
            let hd = net.encode(&mut g, d)?;
            discriminator_loss(&mut g, &net, hs, hg, hd, beta)?
        }
        _ => {
            let x = g.input(obs_matrix(finals.iter().chain(goals).copied()));
            let h = net.encode(&mut g, x)?;
            ae_loss(&mut g, &net, h)?
        }
    };
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        log::error!("embedding loss is {value}; skipping update");
        return Err(RewardError::NonFiniteLoss(value));
    }
    let grads = g.backward(loss)?;
    drop(g);
    optimizer.step(&mut params.phi, &grads)?;
    Ok(Some(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetConfig, ParamSet};
    use crate::rng;
    use std::sync::Arc;

    fn small() -> (NetConfig, ParamSet) {
        let mut cfg = NetConfig::new(12);
        cfg.encoder_hidden = 8;
        cfg.features = 5;
        cfg.recurrent = 6;
        cfg.embedding = 4;
        let p = ParamSet::init(&cfg, true, &mut rng::stream(3, "test", 0));
        (cfg, p)
    }

    #[test]
    fn rectification() {
        assert_eq!(achievement_reward(-0.3), 0.0);
        assert_eq!(achievement_reward(0.7), 0.7);
        assert_eq!(achievement_reward(1.0), 1.0);
    }

    #[test]
    fn similarity_extremes() {
        let e = [0.6, 0.8];
        assert!((goal_similarity(&e, &e) - 1.0).abs() < 1e-10);
        assert!((goal_similarity(&e, &[-0.6, -0.8]) + 1.0).abs() < 1e-10);
        assert_eq!(goal_similarity(&[0.0, 0.0], &e), 0.0);
    }

    #[test]
    fn pixel_reward_cases() {
        let a = Observation::new(1, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Observation::new(1, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_pixel_reward(&a, &a, 4.0).unwrap(), 1.0);
        // Four unit differences.
        assert!((l2_pixel_reward(&a, &b, 4.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(l2_pixel_reward(&a, &b, 0.0), Err(RewardError::InvalidSigma(_))));
    }

    #[test]
    fn equal_logits_give_uniform_discriminator() {
        let (cfg, p) = small();
        let net = Net::frozen(&cfg, &p);
        let h = Tensor::from_rows(1, 5, vec![0.3, -0.2, 0.1, 0.5, 0.4]);
        let decoys = Tensor::from_rows(4, 5, h.data().repeat(4));
        let mut g = Graph::new();
        let (s, t, d) = (g.input(h.clone()), g.input(h.clone()), g.input(decoys));
        let loss = discriminator_loss(&mut g, &net, s, t, d, 5.0).unwrap();
        assert!((g.value(loss).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_autoencoder_has_zero_loss() {
        // Identity embedding over 4 features and identity decoder.
        let mut cfg = NetConfig::new(4);
        cfg.features = 4;
        cfg.embedding = 4;
        let mut p = ParamSet::init(&cfg, true, &mut rng::stream(0, "t", 0));
        p.phi.insert("emb.w".into(), Arc::new(Tensor::identity(4)));
        p.phi.insert("dec.w".into(), Arc::new(Tensor::identity(4)));
        // tanh(h) = 0.5 per entry has unit norm, so ξ(h) = 0.5 per entry and
        // the decoder bias restores h.
        let e = 0.5f64;
        let h = e.atanh();
        p.phi.insert("dec.b".into(), Arc::new(Tensor::filled(&[1, 4], h - e)));
        let net = Net::frozen(&cfg, &p);
        let mut g = Graph::new();
        let f = g.input(Tensor::filled(&[2, 4], h));
        let loss = ae_loss(&mut g, &net, f).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-20);
    }

    #[test]
    fn zero_decoder_loss_is_feature_norm() {
        let (cfg, mut p) = small();
        p.phi.insert("dec.w".into(), Arc::new(Tensor::zeros(&[4, 5])));
        p.phi.insert("dec.b".into(), Arc::new(Tensor::zeros(&[1, 5])));
        let net = Net::frozen(&cfg, &p);
        let h = Tensor::from_rows(1, 5, vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let mut g = Graph::new();
        let f = g.input(h.clone());
        let loss = ae_loss(&mut g, &net, f).unwrap();
        assert!((g.value(loss).item().unwrap() - h.norm().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn kinds_parse() {
        for k in ["discern", "ae", "l2", "none"] {
            assert_eq!(k.parse::<RewardKind>().unwrap().to_string(), k);
        }
        assert!("wgan".parse::<RewardKind>().is_err());
    }
}
