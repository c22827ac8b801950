//! Karhunen-Loève basis of Brownian motion on `[0, 1]`.
//!
//! Brownian motion expands as `W_t = Σ φ_m(t) Z_m` with
//! `φ_m(t) = 2√2 / ((2m-1)π) · sin((2m-1)πt / 2)` and iid standard normal
//! `Z_m`. Driving the linear forward dynamics with the derivative of the
//! truncated series gives the state `μ(t) x₀ + Σ h_m(t) Z_m`, where the
//! response functions
//!
//! ```text
//! h_m(t) = ∫₀ᵗ √β(s) · μ(t)/μ(s) · φ̇_m(s) ds
//! ```
//!
//! have no closed form under the linear β schedule and are integrated with
//! a fixed-panel composite Simpson rule so that tables are reproducible.

mod numeric;

use std::f64::consts::{PI, SQRT_2};

use ndarray::Array2;
use rayon::prelude::*;

pub use numeric::{numeric_kl, CovarianceKernel, NumericKl};

use crate::error::{check_time, Error, Result};
use crate::quadrature::simpson;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_QUADRATURE_PANELS: usize = 4096;

fn check_term(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Domain("basis term index starts at 1".into()));
    }
    Ok(())
}

#[inline]
fn frequency(m: usize) -> f64 {
    (2 * m - 1) as f64 * PI / 2.0
}

#[inline]
pub(crate) fn phi_at(m: usize, t: f64) -> f64 {
    let w = frequency(m);
    SQRT_2 / w * (w * t).sin()
}

#[inline]
pub(crate) fn phi_dot_at(m: usize, t: f64) -> f64 {
    SQRT_2 * (frequency(m) * t).cos()
}

/// Basis function `φ_m(t)`, `m ≥ 1`.
pub fn phi(m: usize, t: f64) -> Result<f64> {
    check_term(m)?;
    check_time(t)?;
    Ok(phi_at(m, t))
}

/// Time derivative `φ̇_m(t) = √2 cos((2m-1)πt/2)`.
pub fn phi_dot(m: usize, t: f64) -> Result<f64> {
    check_term(m)?;
    check_time(t)?;
    Ok(phi_dot_at(m, t))
}

/// `sup_t |φ_m(t)|`.
pub fn phi_sup(m: usize) -> Result<f64> {
    check_term(m)?;
    Ok(SQRT_2 / frequency(m))
}

/// Truncated path `W^M_t = Σ_{m=1..M} φ_m(t) z_m` with `M = z.len()`.
pub fn truncated_bm(t: f64, z: &[f64]) -> Result<f64> {
    check_time(t)?;
    if z.is_empty() {
        return Err(Error::Shape(
            "truncated_bm needs at least one coefficient".into(),
        ));
    }
    Ok(z.iter()
        .enumerate()
        .map(|(i, zm)| phi_at(i + 1, t) * zm)
        .sum())
}

/// Source of per-term weights `φ_m(t)` together with the schedule they live on.
///
/// [`KlBasis`] is the production implementation; tests substitute rigged
/// weights to check algebraic reductions between losses.
pub trait Basis: Sync {
    fn m_terms(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// `φ_m(t)` for `m` in `1..=m_terms`, `t` in `[0, 1]`.
    fn weight(&self, m: usize, t: f64) -> f64;

    fn weights(&self, t: f64) -> Vec<f64> {
        (1..=self.m_terms()).map(|m| self.weight(m, t)).collect()
    }

    fn n_steps(&self) -> usize {
        self.schedule().n_steps
    }
}

/// Analytic truncated basis with a precomputed `h_m(t_k)` table.
#[derive(Debug, Clone)]
pub struct KlBasis {
    m_terms: usize,
    quadrature_panels: usize,
    schedule: NoiseSchedule,
    /// `[M × (N+1)]`, row `m-1` holds `h_m(t_k)`.
    h_table: Array2<f64>,
}

impl KlBasis {
    pub fn new(schedule: NoiseSchedule, m_terms: usize) -> Result<Self> {
        Self::with_panels(schedule, m_terms, DEFAULT_QUADRATURE_PANELS)
    }

    pub fn with_panels(
        schedule: NoiseSchedule,
        m_terms: usize,
        quadrature_panels: usize,
    ) -> Result<Self> {
        if m_terms == 0 {
            return Err(Error::Validation("m_terms must be positive".into()));
        }
        if quadrature_panels == 0 {
            return Err(Error::Validation(
                "quadrature_panels must be positive".into(),
            ));
        }
        let n = schedule.n_steps;
        // each entry is computed independently, so the table is identical
        // whatever the thread count
        let rows: Vec<Vec<f64>> = (1..=m_terms)
            .into_par_iter()
            .map(|m| {
                (0..=n)
                    .map(|k| response(&schedule, quadrature_panels, m, schedule.time_at(k)))
                    .collect()
            })
            .collect();
        let h_table = Array2::from_shape_vec((m_terms, n + 1), rows.concat())
            .expect("table shape matches row lengths");
        Ok(Self {
            m_terms,
            quadrature_panels,
            schedule,
            h_table,
        })
    }

    pub fn quadrature_panels(&self) -> usize {
        self.quadrature_panels
    }

    pub fn h_table(&self) -> &Array2<f64> {
        &self.h_table
    }

    /// On-demand `h_m(t)`; not limited to the grid or to `m ≤ M`.
    pub fn h(&self, m: usize, t: f64) -> Result<f64> {
        check_term(m)?;
        check_time(t)?;
        Ok(response(&self.schedule, self.quadrature_panels, m, t))
    }

    /// Cached `h_m(t_k)`.
    pub fn h_at(&self, m: usize, k: usize) -> Result<f64> {
        if m == 0 || m > self.m_terms {
            return Err(Error::Domain(format!(
                "term {m} outside 1..={}",
                self.m_terms
            )));
        }
        self.schedule.check_index(k)?;
        Ok(self.h_table[[m - 1, k]])
    }

    /// `Σ_{m ≤ M} h_m(t_k)²`, the variance of the exact truncated state.
    pub fn response_variance(&self, k: usize) -> Result<f64> {
        self.schedule.check_index(k)?;
        Ok(self.h_table.column(k).iter().map(|h| h * h).sum())
    }

    /// `φ_m(t_k)` for `m = 1..M`.
    pub fn phi_row(&self, k: usize) -> Result<Vec<f64>> {
        self.schedule.check_index(k)?;
        Ok(self.weights(self.schedule.time_at(k)))
    }

    /// Variance shortfall of the approximate state `μx₀ + σZ'` relative to
    /// the full marginal: `σ(t)² (1 - Σ φ_m(t)² / t)`. Zero at `t = 0`.
    pub fn approx_variance_deficit(&self, k: usize) -> Result<f64> {
        self.schedule.check_index(k)?;
        if k == 0 {
            return Ok(0.0);
        }
        let t = self.schedule.time_at(k);
        let captured: f64 = self.weights(t).iter().map(|p| p * p).sum::<f64>() / t;
        Ok(self.schedule.sigma_at(t).powi(2) * (1.0 - captured))
    }
}

impl Basis for KlBasis {
    fn m_terms(&self) -> usize {
        self.m_terms
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn weight(&self, m: usize, t: f64) -> f64 {
        phi_at(m, t)
    }
}

fn response(schedule: &NoiseSchedule, panels: usize, m: usize, t: f64) -> f64 {
    simpson(
        |s| schedule.beta_at(s).sqrt() * schedule.mu_ratio(t, s) * phi_dot_at(m, s),
        0.0,
        t,
        panels,
    )
}
