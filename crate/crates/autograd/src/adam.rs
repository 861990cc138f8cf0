//! Adam with bias correction and decoupled weight decay.

use thiserror::Error;

use crate::graph::Array;
use crate::params::ParamStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient count {got} does not match parameter count {expected}")]
    Arity { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn first_moments(&self) -> &[Array] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array] {
        &self.v
    }

    /// Applies one update. Gradients are validated before any parameter
    /// is touched, so a rejected step leaves params and moments unchanged.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Arity {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (id, name, _) in params.iter() {
            if grads[id.0].iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
