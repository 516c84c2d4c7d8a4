//! Adam and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::network::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub max_rounds: usize,
    pub pretrain_epochs: usize,
    /// Fraction of inputs zeroed while denoising-pretraining.
    pub masking_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.0005,
            power: 0.98,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs_per_round: 30,
            max_rounds: 4,
            pretrain_epochs: 10,
            masking_rate: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(format!("train.{k}"), m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("lr", format!("{} must be positive", self.base_lr));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return err("power", format!("{} must be positive", self.power));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return err("beta1", format!("{} not in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return err("beta2", format!("{} not in [0, 1)", self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon", format!("{} must be positive", self.epsilon));
        }
        if self.batch_size < 2 {
            return err("batch_size", format!("{} below 2", self.batch_size));
        }
        if self.max_rounds == 0 {
            return err("rounds", "at least one round".into());
        }
        if !(0.0..1.0).contains(&self.masking_rate) {
            return err("masking_rate", format!("{} not in [0, 1)", self.masking_rate));
        }
        Ok(())
    }
}

/// `base * (1 - iter / max_iter)^power`; a zero-length schedule stays at `base`.
pub fn poly_lr(iter: usize, max_iter: usize, base: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Contract(format!("iteration {iter} beyond schedule end {max_iter}")));
    }
    if max_iter == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Adam moments for every parameter of a store, with per-parameter step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimizerConfig) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// One bias-corrected update of each parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numeric {
                    op: format!("gradient of {}", store.get(*id).name),
                });
            }
        }
        for (id, g) in grads {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.value_mut(*id).data_mut();
            for k in 0..theta.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                theta[k] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
