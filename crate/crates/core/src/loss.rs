//! Training objectives: baseline denoising, derivative matching, KL loss,
//! KL partial loss and the multi-channel KL-2nd loss.
//!
//! Every objective is split into a plan (the network inputs and indices it
//! needs) and a score (value and gradient with respect to the predictions),
//! so the same code evaluates a trained network, an analytic oracle, or
//! feeds reverse-mode differentiation through [`DenoiserParams`].

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::forward::{kl_derivative, ForwardSample, SamplePath};
use crate::kl_basis::Basis;

/// Loss family selected in a training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Baseline,
    DerivMatch,
    KlFull,
    /// Random subsequence of `m_prime` basis terms per batch.
    KlPartial {
        m_prime: usize,
    },
    Kl2nd,
}

impl LossKind {
    pub fn parse(name: &str, m_prime: Option<usize>) -> Result<Self> {
        Ok(match name {
            "baseline" => LossKind::Baseline,
            "deriv_match" => LossKind::DerivMatch,
            "kl_full" => LossKind::KlFull,
            "kl_2nd" => LossKind::Kl2nd,
            "kl_partial" => LossKind::KlPartial {
                m_prime: m_prime
                    .ok_or_else(|| Error::Config("kl_partial needs train.partial_terms".into()))?,
            },
            other => return Err(Error::Config(format!("unknown loss kind `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Baseline => "baseline",
            LossKind::DerivMatch => "deriv_match",
            LossKind::KlFull => "kl_full",
            LossKind::KlPartial { .. } => "kl_partial",
            LossKind::Kl2nd => "kl_2nd",
        }
    }

    pub fn is_kl(&self) -> bool {
        !matches!(self, LossKind::Baseline)
    }

    /// Head width the objective expects from the network.
    pub fn head_channels(&self, m_terms: usize) -> usize {
        match self {
            LossKind::Kl2nd => m_terms,
            _ => 1,
        }
    }

    /// Largest index fed to the network: `N·M` for composite indexing.
    pub fn max_index(&self, n_steps: usize, m_terms: usize) -> usize {
        match self {
            LossKind::KlFull | LossKind::KlPartial { .. } => n_steps * m_terms,
            _ => n_steps,
        }
    }
}

/// Per-batch objective; the partial variant carries the selected terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Objective {
    Baseline,
    DerivMatch,
    KlFull,
    /// 1-based, strictly increasing subsequence of `1..=M`.
    KlPartial(Vec<usize>),
    Kl2nd,
}

#[derive(Debug, Clone)]
pub struct LossBatch {
    pub samples: Vec<ForwardSample>,
    pub objective: Objective,
}

/// Anything that maps network inputs and indices to predictions.
pub trait Predictor {
    fn predict(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<Array2<f64>>;
}

impl Predictor for DenoiserParams {
    fn predict(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<Array2<f64>> {
        self.forward_batch(x, indices)
    }
}

impl<F> Predictor for F
where
    F: Fn(ArrayView2<f64>, &[usize]) -> Result<Array2<f64>>,
{
    fn predict(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<Array2<f64>> {
        self(x, indices)
    }
}

struct Plan {
    inputs: Array2<f64>,
    indices: Vec<usize>,
}

impl LossBatch {
    pub fn new(samples: Vec<ForwardSample>, objective: Objective) -> Self {
        Self { samples, objective }
    }

    fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    fn m_terms(&self) -> usize {
        self.samples[0].m_terms()
    }

    fn validate(&self, basis: Option<&dyn Basis>) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Validation("empty loss batch".into()))?;
        let (d, m) = (first.dim(), first.m_terms());
        if self
            .samples
            .iter()
            .any(|s| s.dim() != d || s.m_terms() != m)
        {
            return Err(Error::Shape("samples disagree on dimension or M".into()));
        }
        let path = match self.objective {
            Objective::Baseline => SamplePath::Marginal,
            Objective::DerivMatch => SamplePath::KlExact,
            _ => SamplePath::KlApprox,
        };
        if self.samples.iter().any(|s| s.path != path) {
            return Err(Error::Validation(format!(
                "{:?} objective needs samples on the {path:?} path",
                self.objective
            )));
        }
        if matches!(self.objective, Objective::Baseline) {
            return Ok(());
        }
        let basis = basis.ok_or_else(|| Error::Validation("KL objectives need a basis".into()))?;
        if basis.m_terms() != m {
            return Err(Error::Shape(format!(
                "samples carry M = {m}, basis has M = {}",
                basis.m_terms()
            )));
        }
        if let Some(s) = self
            .samples
            .iter()
            .find(|s| s.k == 0 || s.k > basis.n_steps())
        {
            return Err(Error::Domain(format!(
                "grid index {} outside 1..={}",
                s.k,
                basis.n_steps()
            )));
        }
        if let Objective::KlPartial(sel) = &self.objective {
            if sel.is_empty() || sel.len() > m {
                return Err(Error::Validation(format!(
                    "partial loss needs 1 ≤ M' ≤ {m}, got {}",
                    sel.len()
                )));
            }
            if sel[0] == 0 || *sel.last().unwrap() > m {
                return Err(Error::Validation(format!(
                    "selected terms must lie in 1..={m}"
                )));
            }
            if sel.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(
                    "selected terms must be strictly increasing without duplicates".into(),
                ));
            }
        }
        Ok(())
    }

    fn plan(&self, basis: Option<&dyn Basis>) -> Result<Plan> {
        self.validate(basis)?;
        let d = self.dim();
        let terms: Vec<usize> = match &self.objective {
            Objective::KlFull => (1..=self.m_terms()).collect(),
            Objective::KlPartial(sel) => sel.clone(),
            _ => Vec::new(),
        };
        if terms.is_empty() {
            let mut inputs = Array2::zeros((self.samples.len(), d));
            for (mut row, s) in inputs.rows_mut().into_iter().zip(&self.samples) {
                row.assign(&s.xt);
            }
            let indices = self.samples.iter().map(|s| s.k).collect();
            return Ok(Plan { inputs, indices });
        }
        // NOTE: one expanded batch, input duplicated per selected term
        let n = basis.expect("validated").n_steps();
        let rows = self.samples.len() * terms.len();
        let mut inputs = Array2::zeros((rows, d));
        let mut indices = Vec::with_capacity(rows);
        let mut r = 0;
        for s in &self.samples {
            for &m in &terms {
                inputs.row_mut(r).assign(&s.xt);
                indices.push(n * (m - 1) + s.k);
                r += 1;
            }
        }
        Ok(Plan { inputs, indices })
    }

    /// Loss value and its gradient with respect to the predictions.
    fn score(&self, basis: Option<&dyn Basis>, preds: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let d = self.dim();
        let m = self.m_terms();
        let b = self.samples.len() as f64;
        let expected_cols = match self.objective {
            Objective::Kl2nd => m * d,
            _ => d,
        };
        if preds.ncols() != expected_cols {
            return Err(Error::Shape(format!(
                "predictions have {} columns, objective needs {expected_cols} (head channels must be {})",
                preds.ncols(),
                expected_cols / d
            )));
        }
        let mut grad = Array2::zeros(preds.dim());
        let mut total = 0.0;
        match &self.objective {
            Objective::Baseline | Objective::DerivMatch => {
                let schedule = basis.map(|bs| *bs.schedule());
                for (i, s) in self.samples.iter().enumerate() {
                    let target = match self.objective {
                        Objective::Baseline => s.z_prime.clone(),
                        _ => {
                            let sched = schedule.expect("validated");
                            kl_derivative(&sched, s.xt.view(), sched.time_at(s.k), s.z.view())?
                        }
                    };
                    let resid = &target - &preds.row(i);
                    total += resid.dot(&resid);
                    grad.row_mut(i).assign(&(resid * (-2.0 / b)));
                }
            }
            Objective::KlFull | Objective::Kl2nd => {
                let basis = basis.expect("validated");
                let per_row = matches!(self.objective, Objective::KlFull);
                for (i, s) in self.samples.iter().enumerate() {
                    let t = basis.schedule().time_at(s.k);
                    let w = basis.weights(t);
                    let mut resid = Array1::<f64>::zeros(d);
                    for (j, wm) in w.iter().enumerate() {
                        let p = if per_row {
                            preds.row(i * m + j)
                        } else {
                            preds.slice(s![i, j * d..(j + 1) * d])
                        };
                        resid.scaled_add(*wm, &(&s.z.row(j) - &p));
                    }
                    total += resid.dot(&resid) / t;
                    let coef = -2.0 / (b * t);
                    for (j, wm) in w.iter().enumerate() {
                        let g = &resid * (coef * wm);
                        if per_row {
                            grad.row_mut(i * m + j).assign(&g);
                        } else {
                            grad.slice_mut(s![i, j * d..(j + 1) * d]).assign(&g);
                        }
                    }
                }
            }
            Objective::KlPartial(sel) => {
                let basis = basis.expect("validated");
                let mp = sel.len();
                for (i, s) in self.samples.iter().enumerate() {
                    let t = basis.schedule().time_at(s.k);
                    for (j, &mj) in sel.iter().enumerate() {
                        let r = i * mp + j;
                        let resid = &s.z.row(mj - 1) - &preds.row(r);
                        total += resid.dot(&resid) / t;
                        grad.row_mut(r).assign(&(resid * (-2.0 / (b * t))));
                    }
                }
            }
        }
        Ok((total / b, grad))
    }
}

/// Loss value for an arbitrary predictor (network or oracle).
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    batch: &LossBatch,
    basis: Option<&dyn Basis>,
) -> Result<f64> {
    let plan = batch.plan(basis)?;
    let preds = predictor.predict(plan.inputs.view(), &plan.indices)?;
    if preds.nrows() != plan.indices.len() {
        return Err(Error::Shape(
            "predictor returned the wrong number of rows".into(),
        ));
    }
    Ok(batch.score(basis, &preds)?.0)
}

/// Loss value and gradient with respect to the flat network parameters.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &LossBatch,
    basis: Option<&dyn Basis>,
) -> Result<(f64, Vec<f64>)> {
    let plan = batch.plan(basis)?;
    params.forward_backward(plan.inputs.view(), &plan.indices, |preds| {
        batch.score(basis, preds)
    })
}

fn expect_objective(batch: &LossBatch, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{name} called with a {:?} batch",
            batch.objective
        )))
    }
}

/// Mean `‖ε - Z_θ(x_t, k)‖²`.
pub fn baseline_loss(params: &DenoiserParams, batch: &LossBatch) -> Result<(f64, Vec<f64>)> {
    expect_objective(
        batch,
        batch.objective == Objective::Baseline,
        "baseline_loss",
    )?;
    loss_and_grad(params, batch, None)
}

/// Mean `(1/t_k) ‖Σ_m φ_m(t_k) (z_m - Z̃_θ(x̃, N(m-1)+k))‖²`.
pub fn kl_loss(
    params: &DenoiserParams,
    batch: &LossBatch,
    basis: &dyn Basis,
) -> Result<(f64, Vec<f64>)> {
    expect_objective(batch, batch.objective == Objective::KlFull, "kl_loss")?;
    loss_and_grad(params, batch, Some(basis))
}

/// Mean `(1/t_k) Σ_j ‖z_{m_j} - Z̃_θ(x̃, N(m_j-1)+k)‖²` over the selected terms.
pub fn kl_partial_loss(
    params: &DenoiserParams,
    batch: &LossBatch,
    basis: &dyn Basis,
    m_selected: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let rebuilt = LossBatch {
        samples: batch.samples.clone(),
        objective: Objective::KlPartial(m_selected.to_vec()),
    };
    expect_objective(
        batch,
        matches!(batch.objective, Objective::KlPartial(_)),
        "kl_partial_loss",
    )?;
    loss_and_grad(params, &rebuilt, Some(basis))
}

/// Mean `(1/t_k) ‖φ(t_k) · (Z - Z̃^2nd_θ(x̃, k))‖²` with an M-channel head.
pub fn kl2nd_loss(
    params: &DenoiserParams,
    batch: &LossBatch,
    basis: &dyn Basis,
) -> Result<(f64, Vec<f64>)> {
    expect_objective(batch, batch.objective == Objective::Kl2nd, "kl2nd_loss")?;
    if params.head_channels != basis.m_terms() {
        return Err(Error::Validation(format!(
            "KL-2nd loss needs {} head channels, network has {}",
            basis.m_terms(),
            params.head_channels
        )));
    }
    loss_and_grad(params, batch, Some(basis))
}

/// Mean `‖Ẋ^M_t - v_θ(X^M_t, k)‖²` on exact KL states.
pub fn deriv_match_loss(
    params: &DenoiserParams,
    batch: &LossBatch,
    basis: &dyn Basis,
) -> Result<(f64, Vec<f64>)> {
    expect_objective(
        batch,
        batch.objective == Objective::DerivMatch,
        "deriv_match_loss",
    )?;
    loss_and_grad(params, batch, Some(basis))
}
