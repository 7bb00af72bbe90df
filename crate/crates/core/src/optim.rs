//! Rectified Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl RadamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Length of the approximated simple moving average at infinity.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// `ρ_t` after `step` updates (1-based).
    pub fn rho(&self, step: u64) -> f64 {
        let b2t = self.beta2.powi(step as i32);
        self.rho_inf() - 2.0 * step as f64 * b2t / (1.0 - b2t)
    }
}

/// Moments are kept per parameter, frozen ones included (they stay zero), so
/// indices line up with the store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: RadamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: RadamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len()
            || store.iter().zip(&self.m).zip(&self.v).any(|((p, m), v)| m.len() != p.value.numel() || v.len() != m.len())
        {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        Ok(())
    }

    /// Apply one update from the gradients held in `store`.
    ///
    /// Every gradient is checked before anything is written, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.check(store)?;
        if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.is_finite()) {
            return Err(Error::Training { param: p.name.clone(), detail: "gradient is not finite".into() });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let rho_inf = c.rho_inf();
        let rho = c.rho(t);
        let rect = (rho > 4.0).then(|| {
            (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        });
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data().to_vec();
            for (((x, mi), vi), gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                *x -= match rect {
                    Some(r) => c.lr * r * m_hat / ((*vi / bias2).sqrt() + c.eps),
                    None => c.lr * m_hat,
                };
            }
        }
        Ok(())
    }
}
