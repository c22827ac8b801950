//! Training loop: AdamW updates, EMA shadow weights, periodic evaluation,
//! checkpointing and fine-tune initialization from baseline weights.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as choose_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, CheckpointHeader, ModelMeta};
use crate::config::RunConfig;
use crate::data::{Dataset, DatasetSpec};
use crate::denoiser::{DenoiserConfig, DenoiserParams, HeadInit, OutputCorrection};
use crate::error::{Error, Result};
use crate::eval::{energy_distance, sliced_wasserstein_with_se, EvalReport};
use crate::forward::{sample_kl_approx, ForwardSample};
use crate::kl_basis::{Basis, KlBasis};
use crate::loss::{loss_and_grad, LossBatch, LossKind, Objective};
use crate::sampler::{
    sample, BaselinePredictor, GaussOracle, Kl1Predictor, Kl2Predictor, NoisePredictor,
    PredictorKind, SamplerConfig,
};
use crate::schedule::NoiseSchedule;

pub use crate::data::{make_dataset, DataStream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// RNG stream layout under the run seed.
const INIT_STREAM: u64 = 0;
pub const REFERENCE_STREAM: u64 = u64::MAX;
const EVAL_SEED_OFFSET: u64 = 0x5eed_0000_0000;

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "loss",
    "grad_norm",
    "energy_distance",
    "sliced_wasserstein",
    "sliced_wasserstein_se",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub projections: usize,
    pub repeats: usize,
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub batch_size: usize,
    pub m_terms: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub schedule: NoiseSchedule,
    pub quadrature_panels: usize,
    pub model: DenoiserConfig,
    pub eval: EvalSettings,
    pub config_hash: String,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let schedule = run.schedule()?;
        Ok(Self {
            loss_kind: run.loss_kind()?,
            batch_size: run.batch_size,
            m_terms: run.m_terms,
            n_steps: schedule.n_steps,
            learning_rate: run.learning_rate,
            weight_decay: run.weight_decay,
            ema_decay: run.ema_decay,
            total_steps: run.total_steps,
            seed: run.seed,
            dataset: run.dataset()?,
            eval_every: run.eval_every,
            checkpoint_every: run.checkpoint_every,
            schedule,
            quadrature_panels: run.quadrature_panels,
            model: run.model()?,
            eval: EvalSettings {
                samples: run.eval_samples,
                projections: run.eval_projections,
                repeats: run.eval_repeats,
                sampler: run.sampler().ok(),
            },
            config_hash: run.hash(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub ema: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(params: DenoiserParams) -> Self {
        let n = params.flat_params.len();
        Self {
            ema: params.flat_params.clone(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            params,
            step: 0,
        }
    }

    pub fn ema_params(&self) -> DenoiserParams {
        DenoiserParams {
            flat_params: self.ema.clone(),
            ..self.params.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_step: u64,
    pub last_loss: f64,
    pub evals: Vec<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

/// RNG for stream `stream` of the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer {
    config: TrainConfig,
    basis: Option<KlBasis>,
    dataset: Dataset,
    state: TrainState,
    reference: Option<Array2<f64>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let head = config.loss_kind.head_channels(config.m_terms);
        let params = DenoiserParams::init(
            &config.model,
            head,
            HeadInit::Random,
            &mut stream_rng(config.seed, INIT_STREAM),
        )?;
        Self::with_state(config, TrainState::fresh(params))
    }

    pub fn with_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        let dataset = Dataset::new(config.dataset.clone())?;
        if state.params.data_dim != dataset.dim() {
            return Err(Error::Validation(format!(
                "network data_dim {} does not match dataset dimension {}",
                state.params.data_dim,
                dataset.dim()
            )));
        }
        let want = config.loss_kind.head_channels(config.m_terms);
        if state.params.head_channels != want {
            return Err(Error::Validation(format!(
                "{} needs {want} head channels, network has {}",
                config.loss_kind.name(),
                state.params.head_channels
            )));
        }
        let basis = if config.loss_kind.is_kl() {
            Some(KlBasis::with_panels(
                config.schedule,
                config.m_terms,
                config.quadrature_panels,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            basis,
            dataset,
            state,
            reference: None,
        })
    }

    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.config_hash != config.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written by config {}, resuming with {}",
                ckpt.header.config_hash, config.config_hash
            )));
        }
        let state = TrainState {
            params: ckpt.model()?,
            ema: ckpt.ema_params.clone(),
            adam_m: ckpt.adam_m.clone(),
            adam_v: ckpt.adam_v.clone(),
            step: ckpt.header.step,
        };
        Self::with_state(config, state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn basis(&self) -> Option<&KlBasis> {
        self.basis.as_ref()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Draw a training batch of forward samples for the configured loss.
    pub fn draw_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LossBatch> {
        let cfg = &self.config;
        let x0 = self.dataset.sample(rng, cfg.batch_size);
        let d = x0.ncols();
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for row in x0.rows() {
            let k = rng.random_range(1..=cfg.n_steps);
            let sample = match (cfg.loss_kind, &self.basis) {
                (LossKind::Baseline, _) => {
                    let eps = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
                    ForwardSample::marginal(&cfg.schedule, row.to_owned(), k, eps)?
                }
                (LossKind::DerivMatch, Some(basis)) => {
                    ForwardSample::exact(basis, row.to_owned(), k, normal(rng, cfg.m_terms, d))?
                }
                (_, Some(basis)) => {
                    sample_kl_approx(basis, row.to_owned(), k, normal(rng, cfg.m_terms, d))?
                }
                (_, None) => unreachable!("KL losses always build a basis"),
            };
            samples.push(sample);
        }
        let objective = match cfg.loss_kind {
            LossKind::Baseline => Objective::Baseline,
            LossKind::DerivMatch => Objective::DerivMatch,
            LossKind::KlFull => Objective::KlFull,
            LossKind::Kl2nd => Objective::Kl2nd,
            LossKind::KlPartial { m_prime } => {
                let mut sel: Vec<usize> = choose_indices(rng, cfg.m_terms, m_prime)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                sel.sort_unstable();
                Objective::KlPartial(sel)
            }
        };
        Ok(LossBatch::new(samples, objective))
    }

    /// One optimization step with the RNG stream reserved for this step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let mut rng = stream_rng(self.config.seed, self.state.step + 1);
        self.train_step_with(&mut rng)
    }

    pub fn train_step_with<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepMetrics> {
        let batch = self.draw_batch(rng)?;
        let basis = self.basis.as_ref().map(|b| b as &dyn Basis);
        let (loss, grad) = loss_and_grad(&self.state.params, &batch, basis)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(self.diagnostic(loss, grad_norm)));
        }
        self.apply_update(&grad);
        Ok(StepMetrics {
            step: self.state.step,
            loss,
            grad_norm,
        })
    }

    fn diagnostic(&self, loss: f64, grad_norm: f64) -> String {
        let p = &self.state.params.flat_params;
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bad = p.iter().filter(|v| !v.is_finite()).count();
        format!(
            "non-finite loss at step {}: loss={loss} grad_norm={grad_norm} param_norm={norm} \
             max_abs_param={max} non_finite_params={bad} lr={} loss_kind={}",
            self.state.step + 1,
            self.config.learning_rate,
            self.config.loss_kind.name()
        )
    }

    fn apply_update(&mut self, grad: &[f64]) {
        let cfg = &self.config;
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = cfg.learning_rate;
        let d = cfg.ema_decay;
        for (i, &g) in grad.iter().enumerate() {
            st.adam_m[i] = ADAM_BETA1 * st.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            st.adam_v[i] = ADAM_BETA2 * st.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = st.adam_m[i] / c1;
            let v_hat = st.adam_v[i] / c2;
            let p = &mut st.params.flat_params[i];
            *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * *p);
            st.ema[i] = d * st.ema[i] + (1.0 - d) * *p;
        }
    }

    fn reference_set(&mut self) -> &Array2<f64> {
        if self.reference.is_none() {
            let mut rng = stream_rng(self.config.seed, REFERENCE_STREAM);
            self.reference = Some(self.dataset.sample(&mut rng, self.config.eval.samples));
        }
        self.reference.as_ref().expect("just filled")
    }

    /// Sample with the EMA weights and compare against a fixed reference set.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let started = Instant::now();
        let sampler = self.config.eval.sampler.ok_or_else(|| {
            Error::Config(format!(
                "no sampler applies to {} runs",
                self.config.loss_kind.name()
            ))
        })?;
        let reference = self.reference_set().clone();
        let net = self.state.ema_params();
        let eval = self.config.eval.clone();
        let d = self.dataset.dim();
        let mut sw = Vec::with_capacity(eval.repeats);
        let mut ed = Vec::with_capacity(eval.repeats);
        for r in 0..eval.repeats {
            let cfg = SamplerConfig {
                seed: self
                    .config
                    .seed
                    .wrapping_add(EVAL_SEED_OFFSET)
                    .wrapping_add(r as u64),
                ..sampler
            };
            let generated = self.generate(&net, &cfg, eval.samples, d)?;
            sw.push(
                sliced_wasserstein_with_se(
                    generated.view(),
                    reference.view(),
                    eval.projections,
                    cfg.seed,
                )?
                .value,
            );
            ed.push(energy_distance(generated.view(), reference.view())?);
        }
        let (sw_mean, sw_se) = mean_se(&sw);
        let variance_deficit = match &self.basis {
            Some(b) => (1..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    let s2 = self.config.schedule.sigma_at(t).powi(2);
                    let h2: f64 = (1..=b.m_terms())
                        .map(|m| b.h(m, t).map(|h| h * h))
                        .sum::<Result<f64>>()?;
                    Ok(1.0 - h2 / s2)
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(EvalReport {
            step: self.state.step,
            energy_distance: mean_se(&ed).0,
            sliced_wasserstein: sw_mean,
            sliced_wasserstein_se: sw_se,
            variance_deficit,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    pub fn generate(
        &self,
        net: &DenoiserParams,
        cfg: &SamplerConfig,
        n: usize,
        dim: usize,
    ) -> Result<Array2<f64>> {
        let sched = &self.config.schedule;
        let predictor: Box<dyn NoisePredictor + '_> = match (cfg.predictor, &self.basis) {
            (PredictorKind::Baseline, _) => Box::new(BaselinePredictor(net)),
            (PredictorKind::OracleGauss, _) => Box::new(GaussOracle(*sched)),
            (PredictorKind::Kl1, Some(basis)) => Box::new(Kl1Predictor { net, basis }),
            (PredictorKind::Kl2, Some(basis)) => Box::new(Kl2Predictor { net, basis }),
            (kind, None) => {
                return Err(Error::Config(format!(
                    "predictor {} needs a KL run",
                    kind.name()
                )))
            }
        };
        sample(n, dim, sched, cfg, predictor.as_ref())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config_hash: self.config.config_hash.clone(),
                step: self.state.step,
                loss_kind: self.config.loss_kind.name().to_string(),
                m_terms: self.config.m_terms,
                schedule: self.config.schedule,
                model: ModelMeta::of(&self.state.params),
                param_count: self.state.params.flat_params.len(),
            },
            params: self.state.params.flat_params.clone(),
            ema_params: self.state.ema.clone(),
            adam_m: self.state.adam_m.clone(),
            adam_v: self.state.adam_v.clone(),
        }
    }

    /// Train to `total_steps`, logging metrics and writing checkpoints under
    /// `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunSummary> {
        let started = Instant::now();
        let mut metrics = match out_dir {
            Some(dir) => Some(MetricsLog::open(
                dir,
                &self.config.config_hash,
                self.state.step > 0,
            )?),
            None => None,
        };
        let mut evals = Vec::new();
        let mut last_loss = f64::NAN;
        let mut checkpoint = None;
        while self.state.step < self.config.total_steps {
            let m = match self.train_step() {
                Ok(m) => m,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join("diagnostic.txt");
                        fs::write(&path, format!("{e}\n")).map_err(|err| Error::io(&path, err))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            last_loss = m.loss;
            let step = m.step;
            let report = if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
                let r = self.evaluate()?;
                log::info!(
                    "step {step}: loss {:.5} sliced_wasserstein {:.5} ± {:.5}",
                    m.loss,
                    r.sliced_wasserstein,
                    r.sliced_wasserstein_se
                );
                evals.push(r.clone());
                Some(r)
            } else {
                None
            };
            if let Some(log) = metrics.as_mut() {
                log.row(&m, report.as_ref(), started.elapsed().as_secs_f64())?;
            }
            let at_end = step == self.config.total_steps;
            let periodic =
                self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0;
            if let (Some(dir), true) = (out_dir, at_end || periodic) {
                let ckpt = self.checkpoint();
                if periodic {
                    ckpt.save(&dir.join(format!("ckpt-{step:08}.kld")))?;
                }
                let latest = dir.join("checkpoint.kld");
                ckpt.save(&latest)?;
                checkpoint = Some(latest);
            }
        }
        if let Some(log) = metrics.as_mut() {
            log.flush()?;
        }
        Ok(RunSummary {
            final_step: self.state.step,
            last_loss,
            evals,
            checkpoint,
        })
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn open(dir: &Path, hash: &str, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let append = resume && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !append {
            writeln!(file, "# config_hash={hash}").map_err(|e| Error::io(&path, e))?;
        }
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if !append {
            writer
                .write_record(METRICS_HEADER)
                .map_err(|e| csv_write_error(&path, e))?;
        }
        Ok(Self { path, writer })
    }

    fn row(&mut self, m: &StepMetrics, eval: Option<&EvalReport>, wall: f64) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let record = [
            m.step.to_string(),
            m.loss.to_string(),
            m.grad_norm.to_string(),
            opt(eval.map(|r| r.energy_distance)),
            opt(eval.map(|r| r.sliced_wasserstein)),
            opt(eval.map(|r| r.sliced_wasserstein_se)),
            format!("{wall:.3}"),
        ];
        self.writer
            .write_record(&record)
            .map_err(|e| csv_write_error(&self.path, e))?;
        if eval.is_some() {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_write_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Build KL-1st or KL-2nd starting weights from a baseline checkpoint.
///
/// KL-1st keeps the weights and scales outputs by `c(t) = √t / Σφ_m(t)`;
/// KL-2nd additionally copies the head once per basis term.
pub fn finetune_init(
    baseline: &Checkpoint,
    target: LossKind,
    m_terms: usize,
    n_steps: usize,
) -> Result<DenoiserParams> {
    if baseline.header.loss_kind != LossKind::Baseline.name() {
        return Err(Error::Validation(format!(
            "fine-tuning starts from a baseline checkpoint, got {}",
            baseline.header.loss_kind
        )));
    }
    if baseline.header.model.head_channels != 1 {
        return Err(Error::Validation(format!(
            "baseline checkpoint has {} head channels, expected 1",
            baseline.header.model.head_channels
        )));
    }
    if baseline.header.schedule.n_steps != n_steps {
        log::warn!(
            "baseline was trained on {} grid steps, fine-tuning uses {n_steps}",
            baseline.header.schedule.n_steps
        );
    }
    let mut params = baseline.ema_model()?;
    let correction = OutputCorrection { m_terms, n_steps };
    let clamped: Vec<usize> = (0..=n_steps).filter(|&k| correction.factor(k).1).collect();
    if !clamped.is_empty() {
        log::info!("output correction pinned to 1 at grid steps {clamped:?}");
    }
    match target {
        LossKind::KlFull | LossKind::KlPartial { .. } => {}
        LossKind::Kl2nd => params = params.expand_head(m_terms)?,
        other => {
            return Err(Error::Config(format!(
                "fine-tuning targets KL-1st or KL-2nd losses, not {}",
                other.name()
            )))
        }
    }
    params.correction = Some(correction);
    params.max_index = target.max_index(n_steps, m_terms);
    Ok(params)
}

/// Check that a fine-tuned network fits the architecture in `config`.
pub fn check_architecture(params: &DenoiserParams, config: &TrainConfig) -> Result<()> {
    let m = &config.model;
    if params.data_dim != m.data_dim
        || params.embed_dim != m.embed_dim
        || params.hidden != m.hidden
        || params.activation != m.activation
    {
        return Err(Error::Validation(
            "checkpoint architecture does not match the configured model".into(),
        ));
    }
    Ok(())
}
