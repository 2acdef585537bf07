use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("eps must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }
}

/// Fails on the first gradient holding a NaN or infinity, naming its parameter.
pub fn check_gradients<'a>(grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    for (name, g) in grads {
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.to_string(), index });
        }
    }
    Ok(())
}

/// Euclidean norm of all gradients together.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads.values());
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= coef);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// entry are left untouched and their moments are not advanced.
pub fn adamw_step(params: &mut [&mut Param], grads: &BTreeMap<String, Tensor>, state: &mut OptState) -> Result<()> {
    check_gradients(grads.iter().map(|(n, g)| (n.as_str(), g)))?;
    for p in params.iter() {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.value.shape() {
                return Err(Error::InvalidShape(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
    }
    state.step += 1;
    let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for p in params.iter_mut() {
        let Some(g) = grads.get(&p.name) else { continue };
        let m = state.first.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.second.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = 1.0 - lr * weight_decay;
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w *= decay;
            *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}
