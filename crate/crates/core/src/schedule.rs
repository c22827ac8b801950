//! Linear variance-preserving noise schedule.
//!
//! `beta(t) = beta0 + (beta1 - beta0) t`, with the mean decay
//! `mu(t) = exp(-∫₀ᵗ beta/2)` in closed form and `sigma(t)² = 1 - mu(t)²`.
//! The discrete grid is `t_k = k / n_steps`.

use serde::{Deserialize, Serialize};

use crate::error::{check_time, Error, Result};

pub const DEFAULT_BETA0: f64 = 0.1;
pub const DEFAULT_BETA1: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub n_steps: usize,
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64, n_steps: usize) -> Result<Self> {
        if !(beta0 > 0.0 && beta1 > 0.0 && beta0.is_finite() && beta1.is_finite()) {
            return Err(Error::Validation(format!(
                "beta endpoints must be positive and finite, got ({beta0}, {beta1})"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Validation("n_steps must be positive".into()));
        }
        Ok(Self {
            beta0,
            beta1,
            n_steps,
        })
    }

    /// Default schedule (`beta(t) = 0.1 + 19.9 t`) on an `n_steps` grid.
    pub fn linear(n_steps: usize) -> Result<Self> {
        Self::new(DEFAULT_BETA0, DEFAULT_BETA1, n_steps)
    }

    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        Self::new(self.beta0, self.beta1, n_steps)
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.beta_at(t))
    }

    pub fn mu(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.mu_at(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_at(t))
    }

    /// `ᾱ_k = mu(t_k)²`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.alpha_bar_at(k))
    }

    /// Grid time `t_k = k / N`.
    pub fn time(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.time_at(k))
    }

    pub fn check_index(&self, k: usize) -> Result<()> {
        if k > self.n_steps {
            return Err(Error::Domain(format!(
                "grid index {k} outside [0, {}]",
                self.n_steps
            )));
        }
        Ok(())
    }

    pub(crate) fn beta_at(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `∫₀ᵗ ½β(s) ds`.
    pub(crate) fn half_integral(&self, t: f64) -> f64 {
        0.5 * self.beta0 * t + 0.25 * (self.beta1 - self.beta0) * t * t
    }

    pub(crate) fn mu_at(&self, t: f64) -> f64 {
        (-self.half_integral(t)).exp()
    }

    pub(crate) fn sigma_at(&self, t: f64) -> f64 {
        // 1 - exp(-2I) without cancellation near t = 0
        (-(-2.0 * self.half_integral(t)).exp_m1()).sqrt()
    }

    /// `mu(t) / mu(s)` evaluated as a single exponential.
    pub(crate) fn mu_ratio(&self, t: f64, s: f64) -> f64 {
        (self.half_integral(s) - self.half_integral(t)).exp()
    }

    pub(crate) fn time_at(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }

    pub(crate) fn alpha_bar_at(&self, k: usize) -> f64 {
        (-2.0 * self.half_integral(self.time_at(k))).exp()
    }
}
