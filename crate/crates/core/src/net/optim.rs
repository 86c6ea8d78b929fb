use ndarray::{Array1, Zip};
use serde::{Deserialize, Serialize};

use super::{DriftNet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Array1<F>,
    v: Array1<F>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, m: Array1::zeros(n_params), v: Array1::zeros(n_params), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)`.
    pub fn step(&mut self, theta: &mut Array1<F>, grad: &Array1<F>) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer sized for {} parameters, got theta {} / grad {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = F::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(c.eps);
        Zip::from(theta).and(&mut self.m).and(&mut self.v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p = *p * decay;
            *p = *p - step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
        });
        Ok(())
    }
}

/// Exponential moving average of parameters, used for path sampling.
#[derive(Clone, Debug)]
pub struct Ema<F> {
    pub decay: f64,
    shadow: Array1<F>,
}

impl<F: Real> Ema<F> {
    pub fn new(decay: f64, theta: &Array1<F>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidInput(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self { decay, shadow: theta.clone() })
    }

    /// `shadow <- decay shadow + (1 - decay) theta`.
    pub fn update(&mut self, theta: &Array1<F>) {
        let a = F::of(self.decay);
        let b = F::of(1.0 - self.decay);
        Zip::from(&mut self.shadow).and(theta).for_each(|s, &p| *s = a * *s + b * p);
    }

    pub fn shadow(&self) -> &Array1<F> {
        &self.shadow
    }
}

/// A copy of `net` carrying the EMA shadow parameters.
pub fn with_ema<F: Real>(net: &DriftNet<F>, ema: &Ema<F>) -> DriftNet<F> {
    DriftNet::from_params(*net.spec(), ema.shadow.clone()).expect("EMA shadow matches network size")
}
