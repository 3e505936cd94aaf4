//! Adaptive-moment optimizer with bias correction.

use super::linalg::Scalar;
use crate::{Error, Result};

/// Optimizer hyperparameters. Defaults: lr 1e-3, betas 0.9/0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair of buffers per parameter tensor.
/// The tensor list must be presented in the same order every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update. `params` and `grads` are parallel
    /// tensor lists; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("params/grads tensor count mismatch"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state tensor count mismatch"));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        // fold the bias corrections into a per-step effective rate
        let corr1 = 1.0 - self.cfg.beta1.powf(t);
        let corr2 = 1.0 - self.cfg.beta2.powf(t);
        let alpha = T::from_f64(self.cfg.lr / corr1);
        let corr2_sqrt = T::from_f64(corr2.sqrt());
        let eps = T::from_f64(self.cfg.eps);

        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("parameter/gradient tensor shape mismatch"));
            }
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                // p -= lr * (m/corr1) / (sqrt(v/corr2) + eps)
                p[i] -= alpha * m[i] / (v[i].sqrt() / corr2_sqrt + eps);
            }
        }
        Ok(())
    }
}
