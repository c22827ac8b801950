//! Checkpoint files: a `KLDIFF1` magic line, one JSON header line, then
//! little-endian f64 blocks for parameters, EMA parameters and the two
//! optimizer moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Activation, DenoiserParams, EmbeddingMode, OutputCorrection};
use crate::error::{Error, Result};
use crate::kl_basis::KlBasis;
use crate::sampler::{
    sample, BaselinePredictor, GaussOracle, Kl1Predictor, Kl2Predictor, PredictorKind,
    SamplerConfig,
};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &str = "KLDIFF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub head_channels: usize,
    pub activation: Activation,
    pub embedding: EmbeddingMode,
    pub max_index: usize,
    pub correction: Option<OutputCorrection>,
}

impl ModelMeta {
    pub fn of(params: &DenoiserParams) -> Self {
        Self {
            data_dim: params.data_dim,
            embed_dim: params.embed_dim,
            hidden: params.hidden.clone(),
            head_channels: params.head_channels,
            activation: params.activation,
            embedding: params.embedding,
            max_index: params.max_index,
            correction: params.correction,
        }
    }

    pub fn with_params(&self, flat_params: Vec<f64>) -> Result<DenoiserParams> {
        let params = DenoiserParams {
            data_dim: self.data_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            head_channels: self.head_channels,
            activation: self.activation,
            embedding: self.embedding,
            max_index: self.max_index,
            correction: self.correction,
            flat_params,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub step: u64,
    pub loss_kind: String,
    pub m_terms: usize,
    pub schedule: NoiseSchedule,
    pub model: ModelMeta,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DenoiserParams> {
        self.header.model.with_params(self.params.clone())
    }

    /// The EMA shadow weights, which are what sampling uses.
    pub fn ema_model(&self) -> Result<DenoiserParams> {
        self.header.model.with_params(self.ema_params.clone())
    }

    /// DDIM predictor matching the training loss.
    pub fn default_predictor(&self) -> Result<PredictorKind> {
        match self.header.loss_kind.as_str() {
            "baseline" => Ok(PredictorKind::Baseline),
            "kl_full" | "kl_partial" => Ok(PredictorKind::Kl1),
            "kl_2nd" => Ok(PredictorKind::Kl2),
            other => Err(Error::Config(format!(
                "no DDIM predictor for {other} checkpoints"
            ))),
        }
    }

    /// Draw `n` samples with the EMA weights.
    pub fn sample(&self, n: usize, cfg: &SamplerConfig) -> Result<Array2<f64>> {
        let net = self.ema_model()?;
        let sched = self.header.schedule;
        let d = self.header.model.data_dim;
        match cfg.predictor {
            PredictorKind::Baseline => sample(n, d, &sched, cfg, &BaselinePredictor(&net)),
            PredictorKind::OracleGauss => sample(n, d, &sched, cfg, &GaussOracle(sched)),
            PredictorKind::Kl1 => {
                let basis = KlBasis::new(sched, self.header.m_terms)?;
                sample(
                    n,
                    d,
                    &sched,
                    cfg,
                    &Kl1Predictor {
                        net: &net,
                        basis: &basis,
                    },
                )
            }
            PredictorKind::Kl2 => {
                let basis = KlBasis::new(sched, self.header.m_terms)?;
                sample(
                    n,
                    d,
                    &sched,
                    cfg,
                    &Kl2Predictor {
                        net: &net,
                        basis: &basis,
                    },
                )
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.header.param_count;
        for block in [&self.params, &self.ema_params, &self.adam_m, &self.adam_v] {
            if block.len() != n {
                return Err(Error::Shape(format!(
                    "checkpoint block has {} values, header says {n}",
                    block.len()
                )));
            }
        }
        let header = serde_json::to_string(&self.header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 2 + 32 * n);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for block in [&self.params, &self.ema_params, &self.adam_m, &self.adam_v] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let magic_end = MAGIC.len();
        if bytes.len() <= magic_end
            || &bytes[..magic_end] != MAGIC.as_bytes()
            || bytes[magic_end] != b'\n'
        {
            return Err(bad("missing KLDIFF1 magic"));
        }
        let rest = &bytes[magic_end + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| bad(&e.to_string()))?;
        let body = &rest[nl + 1..];
        let n = header.param_count;
        if body.len() != 4 * 8 * n {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                32 * n,
                body.len()
            )));
        }
        let mut blocks = body.chunks_exact(8 * n.max(1)).map(|c| {
            c.chunks_exact(8)
                .map(|w| f64::from_le_bytes(w.try_into().expect("8-byte word")))
                .collect::<Vec<f64>>()
        });
        let mut next = || blocks.next().unwrap_or_default();
        let ckpt = Checkpoint {
            params: next(),
            ema_params: next(),
            adam_m: next(),
            adam_v: next(),
            header,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
