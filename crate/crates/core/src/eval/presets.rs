//! Named experiment variants, each a small set of config overrides.

use super::EvalError;
use crate::runtime::ExperimentConfig;

pub const PRESETS: [&str; 6] = ["discern-uniform", "discern-diverse", "ae", "l2", "her-only", "no-her"];

pub fn preset_overrides(name: &str) -> Result<&'static [(&'static str, &'static str)], EvalError> {
    Ok(match name {
        "discern-uniform" => &[("reward", "discern"), ("goal_buffer.strategy", "uniform")],
        "discern-diverse" => &[("reward", "discern"), ("goal_buffer.strategy", "diverse")],
        "ae" => &[("reward", "ae")],
        "l2" => &[("reward", "l2")],
        "her-only" => &[("reward", "none"), ("p_her", "1")],
        "no-her" => &[("reward", "discern"), ("p_her", "0")],
        other => {
            return Err(EvalError::UnknownPreset { name: other.into() });
        }
    })
}

pub fn apply_preset(cfg: &mut ExperimentConfig, name: &str) -> Result<(), EvalError> {
    for (k, v) in preset_overrides(name)? {
        cfg.set(k, v).expect("preset overrides use valid keys");
    }
    Ok(())
}
