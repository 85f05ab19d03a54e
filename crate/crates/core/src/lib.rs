//! Jointly learned goal-conditioned policies and discriminative goal-achievement
//! rewards, trained from pixels with no extrinsic reward.

pub mod math;
pub mod agent;
pub mod env;
pub mod eval;
pub mod goalbuf;
pub mod nets;
pub mod reward;
pub mod rng;
pub mod runtime;
