//! DDIM reverse sampling over a time subset with pluggable noise predictors.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::kl_basis::Basis;
use crate::schedule::NoiseSchedule;

/// Chains per worker block; every chain owns its RNG stream so the block
/// size never changes the output.
const CHAIN_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Baseline,
    Kl1,
    Kl2,
    OracleGauss,
}

impl PredictorKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => PredictorKind::Baseline,
            "kl1" => PredictorKind::Kl1,
            "kl2" => PredictorKind::Kl2,
            "oracle-gauss" => PredictorKind::OracleGauss,
            other => return Err(Error::Config(format!("unknown predictor `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::Baseline => "baseline",
            PredictorKind::Kl1 => "kl1",
            PredictorKind::Kl2 => "kl2",
            PredictorKind::OracleGauss => "oracle-gauss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub subset_size: usize,
    pub eta: f64,
    pub predictor: PredictorKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            subset_size: 20,
            eta: 1.0,
            predictor: PredictorKind::Baseline,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::Config("sampler steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// `[0, k_1, …, k_S]` with `k_i = ⌈i·N/S⌉`.
pub fn time_subset(n_steps: usize, subset_size: usize) -> Result<Vec<usize>> {
    if subset_size == 0 || subset_size > n_steps {
        return Err(Error::Config(format!(
            "subset size {subset_size} must lie in 1..={n_steps}"
        )));
    }
    Ok((0..=subset_size)
        .map(|i| (i * n_steps).div_ceil(subset_size))
        .collect())
}

/// Predicted noise `ε̂(x, k)` for a batch of states at grid step `k ≥ 1`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>>;
}

/// Direct prediction by a network trained on the baseline loss.
pub struct BaselinePredictor<'a>(pub &'a DenoiserParams);

impl NoisePredictor for BaselinePredictor<'_> {
    fn predict_noise(&self, x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        self.0.forward_batch(x, &vec![k; x.nrows()])
    }
}

pub struct Kl1Predictor<'a, B: Basis + ?Sized> {
    pub net: &'a DenoiserParams,
    pub basis: &'a B,
}

impl<B: Basis + ?Sized> NoisePredictor for Kl1Predictor<'_, B> {
    fn predict_noise(&self, x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        aggregate_kl1st(self.net, x, k, self.basis)
    }
}

pub struct Kl2Predictor<'a, B: Basis + ?Sized> {
    pub net: &'a DenoiserParams,
    pub basis: &'a B,
}

impl<B: Basis + ?Sized> NoisePredictor for Kl2Predictor<'_, B> {
    fn predict_noise(&self, x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        aggregate_kl2nd(self.net, x, k, self.basis)
    }
}

/// Optimal predictor `σ(t)·x` for standard-normal data.
pub struct GaussOracle(pub NoiseSchedule);

impl NoisePredictor for GaussOracle {
    fn predict_noise(&self, x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        self.0.check_index(k)?;
        Ok(&x * self.0.sigma_at(self.0.time_at(k)))
    }
}

fn check_step(basis: &(impl Basis + ?Sized), k: usize) -> Result<f64> {
    if k == 0 || k > basis.n_steps() {
        return Err(Error::Domain(format!(
            "grid index {k} outside 1..={}",
            basis.n_steps()
        )));
    }
    Ok(basis.schedule().time_at(k))
}

/// `(1/√t) Σ_m φ_m(t) Z̃_θ(x, N(m-1)+k)`, all M evaluations in one batch.
pub fn aggregate_kl1st<B: Basis + ?Sized>(
    net: &DenoiserParams,
    x: ArrayView2<f64>,
    k: usize,
    basis: &B,
) -> Result<Array2<f64>> {
    if net.head_channels != 1 {
        return Err(Error::Validation(format!(
            "KL-1st aggregation needs one head channel, network has {}",
            net.head_channels
        )));
    }
    let t = check_step(basis, k)?;
    let m = basis.m_terms();
    let n = basis.n_steps();
    let (rows, d) = x.dim();
    let mut inputs = Array2::zeros((rows * m, d));
    let mut indices = Vec::with_capacity(rows * m);
    for (r, row) in x.rows().into_iter().enumerate() {
        for j in 0..m {
            inputs.row_mut(r * m + j).assign(&row);
            indices.push(n * j + k);
        }
    }
    let preds = net.forward_batch(inputs.view(), &indices)?;
    let w = basis.weights(t);
    let root = t.sqrt();
    let mut out = Array2::zeros((rows, d));
    for (r, mut o) in out.rows_mut().into_iter().enumerate() {
        for (j, wm) in w.iter().enumerate() {
            o.scaled_add(wm / root, &preds.row(r * m + j));
        }
    }
    Ok(out)
}

/// `(1/√t) Σ_m φ_m(t) channel_m(Z̃^2nd_θ(x, k))`, one forward pass.
pub fn aggregate_kl2nd<B: Basis + ?Sized>(
    net: &DenoiserParams,
    x: ArrayView2<f64>,
    k: usize,
    basis: &B,
) -> Result<Array2<f64>> {
    let m = basis.m_terms();
    if net.head_channels != m {
        return Err(Error::Validation(format!(
            "KL-2nd aggregation needs {m} head channels, network has {}",
            net.head_channels
        )));
    }
    let t = check_step(basis, k)?;
    let (rows, d) = x.dim();
    let preds = net.forward_batch(x, &vec![k; rows])?;
    let w = basis.weights(t);
    let root = t.sqrt();
    let mut out = Array2::zeros((rows, d));
    for (j, wm) in w.iter().enumerate() {
        out.scaled_add(wm / root, &preds.slice(s![.., j * d..(j + 1) * d]));
    }
    Ok(out)
}

/// One DDIM update from `k_cur` to `k_prev < k_cur` using cumulative `ᾱ`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    k_cur: usize,
    k_prev: usize,
    eta: f64,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k_cur == 0 || k_prev >= k_cur {
        return Err(Error::Domain(format!(
            "DDIM step needs 0 ≤ k_prev < k_cur, got {k_prev} → {k_cur}"
        )));
    }
    schedule.check_index(k_cur)?;
    if x.dim() != eps_hat.dim() || x.dim() != noise.dim() {
        return Err(Error::Shape(
            "state, noise estimate and noise must agree".into(),
        ));
    }
    let a_cur = schedule.alpha_bar_at(k_cur);
    let a_prev = schedule.alpha_bar_at(k_prev);
    if 1.0 - a_cur <= 0.0 {
        return Err(Error::Numeric(format!("1 - ᾱ vanishes at k = {k_cur}")));
    }
    let sigma = eta
        * ((1.0 - a_prev) / (1.0 - a_cur) * (1.0 - a_cur / a_prev))
            .max(0.0)
            .sqrt();
    let x0 = (&x - &(&eps_hat * (1.0 - a_cur).sqrt())) / a_cur.sqrt();
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0 * a_prev.sqrt();
    out.scaled_add(dir, &eps_hat);
    if sigma > 0.0 {
        out.scaled_add(sigma, &noise);
    }
    Ok(out)
}

/// Chain `c` draws from ChaCha stream `c` of the sampler seed.
fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn normal_rows(rngs: &mut [ChaCha8Rng], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rngs.len(), d));
    for (mut row, rng) in out.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.mapv_inplace(|_| StandardNormal.sample(rng));
    }
    out
}

/// Run `n` independent chains from `N(0, I)` through the DDIM subset.
pub fn sample<P: NoisePredictor + ?Sized>(
    n: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    predictor: &P,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let subset = time_subset(schedule.n_steps, cfg.subset_size)?;
    let starts: Vec<usize> = (0..n).step_by(CHAIN_BLOCK).collect();
    let blocks: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHAIN_BLOCK).min(n);
            let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|c| chain_rng(cfg.seed, c)).collect();
            let mut x = normal_rows(&mut rngs, dim);
            for i in (1..subset.len()).rev() {
                let eps = predictor.predict_noise(x.view(), subset[i])?;
                if eps.dim() != x.dim() {
                    return Err(Error::Shape(format!(
                        "predictor returned {:?} for state {:?}",
                        eps.dim(),
                        x.dim()
                    )));
                }
                let noise = if cfg.eta > 0.0 {
                    normal_rows(&mut rngs, dim)
                } else {
                    Array2::zeros(x.dim())
                };
                x = ddim_step(
                    schedule,
                    x.view(),
                    eps.view(),
                    subset[i],
                    subset[i - 1],
                    cfg.eta,
                    noise.view(),
                )?;
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    if blocks.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("blocks share width"))
}
