//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Unknown or repeated keys are
//! rejected. The config hash is a SHA-256 digest of every resolved key
//! except `out_dir`, defaults included, in sorted order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::denoiser::{Activation, DenoiserConfig};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::sampler::{PredictorKind, SamplerConfig};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA0, DEFAULT_BETA1};

pub const KL_DEFAULT_STEPS: usize = 20;
pub const BASELINE_DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    FixedN,
    FixedProduct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub beta0: f64,
    pub beta1: f64,
    /// `None` picks 20 for KL losses and 1000 for the baseline.
    pub n_steps: Option<usize>,

    pub m_terms: usize,
    pub quadrature_panels: usize,

    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,

    pub loss: String,
    pub partial_terms: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,

    pub data_kind: String,
    pub data_dim: usize,
    pub data_components: usize,
    pub data_path: Option<PathBuf>,
    pub data_rows: usize,

    pub sampler_steps: usize,
    pub sampler_eta: f64,
    /// `auto` follows the loss kind.
    pub sampler_predictor: String,

    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_repeats: usize,
    pub eval_threshold: Option<f64>,

    pub sweep_mode: SweepMode,
    pub sweep_m_values: Vec<usize>,
    pub sweep_product: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            beta0: DEFAULT_BETA0,
            beta1: DEFAULT_BETA1,
            n_steps: None,
            m_terms: 8,
            quadrature_panels: crate::kl_basis::DEFAULT_QUADRATURE_PANELS,
            hidden: vec![128; 3],
            embed_dim: 64,
            activation: Activation::Silu,
            loss: "baseline".into(),
            partial_terms: None,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ema_decay: 0.999,
            total_steps: 1000,
            eval_every: 0,
            checkpoint_every: 0,
            data_kind: "gmm".into(),
            data_dim: 2,
            data_components: 8,
            data_path: None,
            data_rows: 0,
            sampler_steps: 20,
            sampler_eta: 1.0,
            sampler_predictor: "auto".into(),
            eval_samples: 1024,
            eval_projections: crate::eval::DEFAULT_PROJECTIONS,
            eval_repeats: 4,
            eval_threshold: None,
            sweep_mode: SweepMode::FixedN,
            sweep_m_values: vec![1, 2, 4, 8],
            sweep_product: 200,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("`{key}`: cannot read `{value}` as {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, want))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| num(key, v.trim(), "a comma-separated list of integers"))
        .collect()
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        num(key, value, want).map(Some)
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if seen.insert(key.to_string(), lineno + 1).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::parse(&text)
    }

    /// Assign one key; used by the parser and for programmatic overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, value, "an integer")?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "schedule.beta0" => self.beta0 = num(key, value, "a number")?,
            "schedule.beta1" => self.beta1 = num(key, value, "a number")?,
            "schedule.n_steps" => self.n_steps = optional(key, value, "an integer")?,
            "basis.m_terms" => self.m_terms = num(key, value, "an integer")?,
            "basis.quadrature_panels" => self.quadrature_panels = num(key, value, "an integer")?,
            "model.hidden" => self.hidden = list(key, value)?,
            "model.embed_dim" => self.embed_dim = num(key, value, "an integer")?,
            "model.activation" => self.activation = Activation::parse(value)?,
            "train.loss" => {
                LossKind::parse(value, Some(1))?;
                self.loss = value.to_string();
            }
            "train.partial_terms" => self.partial_terms = optional(key, value, "an integer")?,
            "train.batch_size" => self.batch_size = num(key, value, "an integer")?,
            "train.learning_rate" => self.learning_rate = num(key, value, "a number")?,
            "train.weight_decay" => self.weight_decay = num(key, value, "a number")?,
            "train.ema_decay" => self.ema_decay = num(key, value, "a number")?,
            "train.total_steps" => self.total_steps = num(key, value, "an integer")?,
            "train.eval_every" => self.eval_every = num(key, value, "an integer")?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, value, "an integer")?,
            "data.kind" => self.data_kind = value.to_string(),
            "data.dim" => self.data_dim = num(key, value, "an integer")?,
            "data.components" => self.data_components = num(key, value, "an integer")?,
            "data.path" => {
                self.data_path =
                    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "data.rows" => self.data_rows = num(key, value, "an integer")?,
            "sampler.steps" => self.sampler_steps = num(key, value, "an integer")?,
            "sampler.eta" => self.sampler_eta = num(key, value, "a number")?,
            "sampler.predictor" => self.sampler_predictor = value.to_string(),
            "eval.samples" => self.eval_samples = num(key, value, "an integer")?,
            "eval.projections" => self.eval_projections = num(key, value, "an integer")?,
            "eval.repeats" => self.eval_repeats = num(key, value, "an integer")?,
            "eval.threshold" => self.eval_threshold = optional(key, value, "a number")?,
            "sweep.mode" => {
                self.sweep_mode = match value {
                    "fixed-n" => SweepMode::FixedN,
                    "fixed-product" => SweepMode::FixedProduct,
                    _ => return Err(bad(key, value, "fixed-n or fixed-product")),
                }
            }
            "sweep.m_values" => self.sweep_m_values = list(key, value)?,
            "sweep.product" => self.sweep_product = num(key, value, "an integer")?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("out_dir", self.out_dir.display().to_string());
        m.insert("schedule.beta0", self.beta0.to_string());
        m.insert("schedule.beta1", self.beta1.to_string());
        m.insert("schedule.n_steps", self.resolved_n_steps().to_string());
        m.insert("basis.m_terms", self.m_terms.to_string());
        m.insert(
            "basis.quadrature_panels",
            self.quadrature_panels.to_string(),
        );
        m.insert("model.hidden", join(&self.hidden));
        m.insert("model.embed_dim", self.embed_dim.to_string());
        m.insert("model.activation", self.activation.name().to_string());
        m.insert("train.loss", self.loss.clone());
        m.insert("train.partial_terms", show(&self.partial_terms));
        m.insert("train.batch_size", self.batch_size.to_string());
        m.insert("train.learning_rate", self.learning_rate.to_string());
        m.insert("train.weight_decay", self.weight_decay.to_string());
        m.insert("train.ema_decay", self.ema_decay.to_string());
        m.insert("train.total_steps", self.total_steps.to_string());
        m.insert("train.eval_every", self.eval_every.to_string());
        m.insert("train.checkpoint_every", self.checkpoint_every.to_string());
        m.insert("data.kind", self.data_kind.clone());
        m.insert("data.dim", self.data_dim.to_string());
        m.insert("data.components", self.data_components.to_string());
        m.insert(
            "data.path",
            self.data_path
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        m.insert("data.rows", self.data_rows.to_string());
        m.insert("sampler.steps", self.sampler_steps.to_string());
        m.insert("sampler.eta", self.sampler_eta.to_string());
        m.insert("sampler.predictor", self.sampler_predictor.clone());
        m.insert("eval.samples", self.eval_samples.to_string());
        m.insert("eval.projections", self.eval_projections.to_string());
        m.insert("eval.repeats", self.eval_repeats.to_string());
        m.insert("eval.threshold", show(&self.eval_threshold));
        m.insert(
            "sweep.mode",
            match self.sweep_mode {
                SweepMode::FixedN => "fixed-n",
                SweepMode::FixedProduct => "fixed-product",
            }
            .into(),
        );
        m.insert("sweep.m_values", join(&self.sweep_m_values));
        m.insert("sweep.product", self.sweep_product.to_string());
        m
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.resolved().iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    /// Content digest; `out_dir` is file layout and stays out of it.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.resolved().iter().filter(|(k, _)| **k != "out_dir") {
            hasher.update(format!("{k} = {v}\n").as_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        LossKind::parse(&self.loss, self.partial_terms)
    }

    pub fn resolved_n_steps(&self) -> usize {
        self.n_steps.unwrap_or(if self.loss == "baseline" {
            BASELINE_DEFAULT_STEPS
        } else {
            KL_DEFAULT_STEPS
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.beta0, self.beta1, self.resolved_n_steps())
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        Ok(match self.data_kind.as_str() {
            "gauss" => DatasetSpec::Gauss { dim: self.data_dim },
            "gmm" => DatasetSpec::Gmm {
                components: self.data_components,
                dim: self.data_dim,
            },
            "rings" => DatasetSpec::Rings,
            "tiny-image" => DatasetSpec::TinyImage {
                path: self
                    .data_path
                    .clone()
                    .ok_or_else(|| Error::Config("tiny-image needs data.path".into()))?,
                rows: self.data_rows,
                dim: self.data_dim,
            },
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        })
    }

    pub fn model(&self) -> Result<DenoiserConfig> {
        let kind = self.loss_kind()?;
        Ok(DenoiserConfig {
            data_dim: self.dataset()?.dim(),
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            max_index: kind.max_index(self.resolved_n_steps(), self.m_terms),
        })
    }

    pub fn predictor(&self) -> Result<PredictorKind> {
        if self.sampler_predictor != "auto" {
            return PredictorKind::parse(&self.sampler_predictor);
        }
        Ok(match self.loss_kind()? {
            LossKind::Baseline => PredictorKind::Baseline,
            LossKind::KlFull | LossKind::KlPartial { .. } => PredictorKind::Kl1,
            LossKind::Kl2nd => PredictorKind::Kl2,
            LossKind::DerivMatch => {
                return Err(Error::Config(
                    "deriv_match trains a velocity field; no DDIM predictor applies".into(),
                ))
            }
        })
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            subset_size: self.sampler_steps,
            eta: self.sampler_eta,
            predictor: self.predictor()?,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.loss_kind()?;
        if let LossKind::KlPartial { m_prime } = kind {
            if m_prime == 0 || m_prime > self.m_terms {
                return Err(Error::Config(format!(
                    "train.partial_terms = {m_prime} must lie in 1..={}",
                    self.m_terms
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("train.ema_decay must lie in [0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        if self.m_terms == 0 || self.quadrature_panels == 0 {
            return Err(Error::Config(
                "basis.m_terms and basis.quadrature_panels must be positive".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.eval_samples == 0 || self.eval_projections == 0 || self.eval_repeats == 0 {
            return Err(Error::Config("eval sizes must be positive".into()));
        }
        if self.sweep_m_values.is_empty() || self.sweep_m_values.contains(&0) {
            return Err(Error::Config("sweep.m_values must be positive".into()));
        }
        self.schedule()?;
        let data = self.dataset()?;
        if data.dim() == 0 {
            return Err(Error::Config("data.dim must be positive".into()));
        }
        if self.eval_every > 0 {
            self.sampler()?;
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
