//! Numerical KL expansion of a general covariance kernel.
//!
//! Discretizes `∫₀¹ R(t, s) φ(s) ds = λ φ(t)` on a uniform grid with
//! trapezoid weights `w` and solves the symmetric problem
//! `W^½ K W^½ u = λ u`, mapping back with `φ = W^-½ u`, which makes every
//! eigenfunction unit-norm under the same trapezoid rule.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};

type Evaluator = dyn Fn(f64, f64) -> f64 + Send + Sync;

pub struct CovarianceKernel {
    evaluator: Box<Evaluator>,
    grid_size: usize,
}

impl fmt::Debug for CovarianceKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CovarianceKernel")
            .field("grid_size", &self.grid_size)
            .finish_non_exhaustive()
    }
}

impl CovarianceKernel {
    pub fn new<F>(evaluator: F, grid_size: usize) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            evaluator: Box::new(evaluator),
            grid_size,
        }
    }

    /// `R(s, t) = min(s, t)`.
    pub fn brownian(grid_size: usize) -> Self {
        Self::new(f64::min, grid_size)
    }

    /// `R(s, t) = c`.
    pub fn constant(c: f64, grid_size: usize) -> Self {
        Self::new(move |_, _| c, grid_size)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        (self.evaluator)(s, t)
    }
}

#[derive(Debug, Clone)]
pub struct NumericKl {
    /// Uniform grid on `[0, 1]` including both endpoints.
    pub grid: Vec<f64>,
    /// Largest first.
    pub eigenvalues: Vec<f64>,
    /// `[n_modes × grid_size]`.
    pub eigenfunctions: Array2<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

pub fn numeric_kl(kernel: &CovarianceKernel, n_modes: usize) -> Result<NumericKl> {
    let g = kernel.grid_size;
    if n_modes == 0 {
        return Err(Error::Validation("n_modes must be positive".into()));
    }
    if g < 4 * n_modes || g < 2 {
        return Err(Error::Validation(format!(
            "grid_size {g} must be at least 4 * n_modes = {}",
            4 * n_modes
        )));
    }
    let h = 1.0 / (g - 1) as f64;
    let grid: Vec<f64> = (0..g).map(|i| i as f64 * h).collect();
    let weights: Vec<f64> = (0..g)
        .map(|i| if i == 0 || i == g - 1 { 0.5 * h } else { h })
        .collect();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();

    let cov = DMatrix::from_fn(g, g, |i, j| kernel.eval(grid[i], grid[j]));
    let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..g {
        for j in (i + 1)..g {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if !a.is_finite() || (a - b).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Validation(format!(
                    "kernel is not symmetric at ({}, {}): {a} vs {b}",
                    grid[i], grid[j]
                )));
            }
        }
    }
    let sym = DMatrix::from_fn(g, g, |i, j| sqrt_w[i] * cov[(i, j)] * sqrt_w[j]);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if let Some(&lowest) = order.last() {
        let min = eig.eigenvalues[lowest];
        if min < -PSD_TOL * scale {
            return Err(Error::Validation(format!(
                "kernel is not positive semidefinite (eigenvalue {min})"
            )));
        }
    }

    let mut eigenvalues = Vec::with_capacity(n_modes);
    let mut eigenfunctions = Array2::zeros((n_modes, g));
    for (row, &col) in order.iter().take(n_modes).enumerate() {
        eigenvalues.push(eig.eigenvalues[col]);
        let u = eig.eigenvectors.column(col);
        let mut f: Vec<f64> = (0..g).map(|i| u[i] / sqrt_w[i]).collect();
        let peak = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let sign = f
            .iter()
            .find(|v| v.abs() > 1e-8 * peak)
            .map_or(1.0, |v| v.signum());
        for v in &mut f {
            *v *= sign;
        }
        eigenfunctions
            .row_mut(row)
            .assign(&ndarray::Array1::from(f));
    }
    Ok(NumericKl {
        grid,
        eigenvalues,
        eigenfunctions,
    })
}
