//! Forward-process states.
//!
//! All randomness enters through arguments; every function here is a
//! deterministic map of its inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{check_time, Error, Result};
use crate::kl_basis::{phi_dot_at, Basis, KlBasis};
use crate::schedule::NoiseSchedule;

/// How a [`ForwardSample`]'s noised state was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplePath {
    /// `x_t = μ x₀ + σ ε` with `z` holding the single row `ε`.
    Marginal,
    /// Approximate KL state `μ x₀ + σ Z'`.
    KlApprox,
    /// Exact truncated KL state `μ x₀ + Σ h_m Z_m`.
    KlExact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub x0: Array1<f64>,
    /// Grid index, `1..=N` for training draws.
    pub k: usize,
    /// `[M × D]` coefficients (`[1 × D]` noise for the marginal path).
    pub z: Array2<f64>,
    pub xt: Array1<f64>,
    /// Aggregate noise; equals the single noise row on the marginal path and
    /// is zero on the exact path.
    pub z_prime: Array1<f64>,
    pub path: SamplePath,
}

impl ForwardSample {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn m_terms(&self) -> usize {
        self.z.nrows()
    }

    /// Baseline training sample drawn from the exact SDE marginal.
    pub fn marginal(
        schedule: &NoiseSchedule,
        x0: Array1<f64>,
        k: usize,
        noise: Array1<f64>,
    ) -> Result<Self> {
        let xt = sample_sde_marginal(schedule, x0.view(), k, noise.view())?;
        let z = noise.clone().insert_axis(Axis(0));
        Ok(Self {
            x0,
            k,
            z,
            xt,
            z_prime: noise,
            path: SamplePath::Marginal,
        })
    }

    /// Sample on the exact KL path, used by the derivative-matching loss.
    pub fn exact(basis: &KlBasis, x0: Array1<f64>, k: usize, z: Array2<f64>) -> Result<Self> {
        let xt = sample_kl_exact(basis, x0.view(), k, z.view())?;
        let dim = x0.len();
        Ok(Self {
            x0,
            k,
            z,
            xt,
            z_prime: Array1::zeros(dim),
            path: SamplePath::KlExact,
        })
    }
}

fn check_dims(x0: ArrayView1<f64>, other: usize, what: &str) -> Result<()> {
    if x0.len() != other {
        return Err(Error::Shape(format!(
            "{what} has dimension {other}, data has {}",
            x0.len()
        )));
    }
    Ok(())
}

/// `μ(t_k) x₀ + σ(t_k) ε`.
pub fn sample_sde_marginal(
    schedule: &NoiseSchedule,
    x0: ArrayView1<f64>,
    k: usize,
    noise: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    schedule.check_index(k)?;
    check_dims(x0, noise.len(), "noise")?;
    let t = schedule.time_at(k);
    let (mu, sigma) = (schedule.mu_at(t), schedule.sigma_at(t));
    Ok(&x0 * mu + &noise * sigma)
}

/// `μ(t_k) x₀ + Σ_m h_m(t_k) z_m`.
pub fn sample_kl_exact(
    basis: &KlBasis,
    x0: ArrayView1<f64>,
    k: usize,
    z: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    basis.schedule().check_index(k)?;
    if z.nrows() != basis.m_terms() {
        return Err(Error::Shape(format!(
            "{} coefficient rows for a basis with M = {}",
            z.nrows(),
            basis.m_terms()
        )));
    }
    check_dims(x0, z.ncols(), "coefficients")?;
    let mu = basis.schedule().mu_at(basis.schedule().time_at(k));
    let h = basis.h_table().column(k);
    Ok(&x0 * mu + &h.dot(&z))
}

/// Approximate KL state used by the KL losses:
/// `Z' = Σ_m (φ_m(t_k)/√t_k) z_m`, `x̃ = μ(t_k) x₀ + σ(t_k) Z'`.
pub fn sample_kl_approx<B: Basis + ?Sized>(
    basis: &B,
    x0: Array1<f64>,
    k: usize,
    z: Array2<f64>,
) -> Result<ForwardSample> {
    let schedule = basis.schedule();
    schedule.check_index(k)?;
    if k == 0 {
        return Err(Error::Domain(
            "approximate KL state needs k ≥ 1 (divides by √t)".into(),
        ));
    }
    if z.nrows() != basis.m_terms() {
        return Err(Error::Shape(format!(
            "{} coefficient rows for a basis with M = {}",
            z.nrows(),
            basis.m_terms()
        )));
    }
    check_dims(x0.view(), z.ncols(), "coefficients")?;
    let t = schedule.time_at(k);
    let scale = t.sqrt().recip();
    let w = Array1::from(basis.weights(t)) * scale;
    let z_prime = w.dot(&z);
    let xt = &x0 * schedule.mu_at(t) + &z_prime * schedule.sigma_at(t);
    Ok(ForwardSample {
        x0,
        k,
        z,
        xt,
        z_prime,
        path: SamplePath::KlApprox,
    })
}

/// Right-hand side of the KL diffusion ODE:
/// `-½β(t) x + √β(t) Σ_m φ̇_m(t) z_m`.
pub fn kl_derivative(
    schedule: &NoiseSchedule,
    x: ArrayView1<f64>,
    t: f64,
    z: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_time(t)?;
    check_dims(x, z.ncols(), "coefficients")?;
    let beta = schedule.beta_at(t);
    let w: Array1<f64> = (1..=z.nrows()).map(|m| phi_dot_at(m, t)).collect();
    Ok(&x * (-0.5 * beta) + &w.dot(&z) * beta.sqrt())
}
