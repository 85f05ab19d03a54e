use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Gradients, MathError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Plain (uncentered) RMSProp:
///
/// ```text
/// acc ← decay·acc + (1 − decay)·g²
/// p   ← p − lr·g / √(acc + ε)
/// ```
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    accumulators: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self) -> &BTreeMap<String, Tensor> {
        &self.accumulators
    }

    pub fn set_accumulator(&mut self, name: &str, acc: Tensor) {
        self.accumulators.insert(name.to_string(), acc);
    }

    /// Applies one step to every parameter that has a gradient. Nothing is modified
    /// if any gradient is non-finite or mis-shaped.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Arc<Tensor>>,
        grads: &Gradients,
    ) -> Result<(), MathError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| MathError::MissingParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(MathError::Shape {
                    node: name.clone(),
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(MathError::NonFiniteGradient(name.clone()));
            }
        }
        let RmsPropConfig {
            learning_rate,
            decay,
            epsilon,
        } = self.config;
        for (name, g) in grads {
            let acc = self
                .accumulators
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = Arc::make_mut(params.get_mut(name).expect("checked above"));
            for ((pv, av), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(acc.data_mut().iter_mut())
                .zip(g.data())
            {
                *av = decay * *av + (1.0 - decay) * gv * gv;
                *pv -= learning_rate * gv / (*av + epsilon).sqrt();
            }
        }
        Ok(())
    }
}
