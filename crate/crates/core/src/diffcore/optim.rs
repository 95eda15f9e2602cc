use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; gradients above it are rescaled.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("momentum must lie in [0, 1)".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Validation("clip_norm must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    config: SgdConfig,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update from the gradients stored in `store`.
    ///
    /// `lr_scale` returns a per-parameter multiplier on the learning rate
    /// (0 freezes a parameter).
    pub fn step(&mut self, store: &mut ParameterStore<S>, lr_scale: impl Fn(&str) -> f64) {
        let norm = store.grad_norm();
        let clip = S::lit(self.config.clip_norm);
        let shrink = if norm > clip { clip / norm } else { S::one() };
        let momentum = S::lit(self.config.momentum);
        let params = store.params_mut();
        self.velocity.resize_with(params.len(), Vec::new);
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let scale = lr_scale(&p.name);
            if scale == 0.0 {
                continue;
            }
            if v.len() != p.value.len() {
                *v = vec![S::zero(); p.value.len()];
            }
            let lr = S::lit(self.config.learning_rate * scale);
            for ((x, vel), &g) in p.value.iter_mut().zip(v.iter_mut()).zip(&p.grad) {
                *vel = momentum * *vel + g * shrink;
                *x -= lr * *vel;
            }
        }
        store.bump_step();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Init, Tape};

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParameterStore::<f64>::new(0);
        let id = store.add("x", &[1], Init::Constant { value: 3.0 }).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq).unwrap();
            store.set_grads(&tape.backward(loss).unwrap());
            opt.step(&mut store, |_| 1.0);
        }
        assert!(store.parameter(id).value[0].abs() < 1e-3);
        assert_eq!(store.step(), 300);
    }

    #[test]
    fn clipping_bounds_first_step() {
        let mut store = ParameterStore::<f64>::new(0);
        let id = store.add("x", &[1], Init::Constant { value: 0.0 }).unwrap();
        store.parameter_mut(id).grad[0] = 100.0;
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut store, |_| 1.0);
        assert!((store.parameter(id).value[0] + 1e-3 * 5.0).abs() < 1e-15);
    }
}
