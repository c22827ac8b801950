//! Seeded toy data sources, standardized to zero mean and unit variance
//! per dimension.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Spacing between neighbouring mixture centers, in component standard deviations.
pub const GMM_SEPARATION: f64 = 10.0;
const RING_RADII: [f64; 2] = [1.0, 2.0];
const RING_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Gauss {
        dim: usize,
    },
    Gmm {
        components: usize,
        dim: usize,
    },
    Rings,
    /// Row-major little-endian f64 matrix of shape `rows × dim`.
    TinyImage {
        path: PathBuf,
        rows: usize,
        dim: usize,
    },
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gauss { dim } | DatasetSpec::Gmm { dim, .. } => *dim,
            DatasetSpec::Rings => 2,
            DatasetSpec::TinyImage { dim, .. } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Gauss { .. } => "gauss",
            DatasetSpec::Gmm { .. } => "gmm",
            DatasetSpec::Rings => "rings",
            DatasetSpec::TinyImage { .. } => "tiny-image",
        }
    }
}

/// Stateless generator; all randomness comes from the caller's RNG.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    kind: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Gauss,
    Mixture {
        centers: Array2<f64>,
        mean: Array1<f64>,
        scale: Array1<f64>,
    },
    Rings {
        scale: f64,
    },
    Table(Array2<f64>),
}

impl Dataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        let kind = match &spec {
            DatasetSpec::Gauss { dim } => {
                positive(*dim, "data.dim")?;
                Source::Gauss
            }
            DatasetSpec::Gmm { components, dim } => {
                positive(*components, "data.components")?;
                positive(*dim, "data.dim")?;
                mixture(*components, *dim)
            }
            DatasetSpec::Rings => {
                let mean_r2 =
                    RING_RADII.iter().map(|r| r * r).sum::<f64>() / RING_RADII.len() as f64;
                Source::Rings {
                    scale: (mean_r2 / 2.0 + RING_NOISE * RING_NOISE).sqrt(),
                }
            }
            DatasetSpec::TinyImage { path, rows, dim } => {
                Source::Table(standardize(read_table(path, *rows, *dim)?))
            }
        };
        Ok(Self { spec, kind })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Mixture centers in standardized coordinates, `[K × D]`.
    pub fn centers(&self) -> Option<Array2<f64>> {
        match &self.kind {
            Source::Mixture {
                centers,
                mean,
                scale,
            } => Some((centers - mean) / scale),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            match &self.kind {
                Source::Gauss => row.mapv_inplace(|_| StandardNormal.sample(rng)),
                Source::Mixture {
                    centers,
                    mean,
                    scale,
                } => {
                    let c = rng.random_range(0..centers.nrows());
                    for j in 0..d {
                        let v: f64 = StandardNormal.sample(rng);
                        row[j] = (centers[(c, j)] + v - mean[j]) / scale[j];
                    }
                }
                Source::Rings { scale } => {
                    let r = RING_RADII[rng.random_range(0..RING_RADII.len())];
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    row[0] = (r * theta.cos() + RING_NOISE * nx) / scale;
                    row[1] = (r * theta.sin() + RING_NOISE * ny) / scale;
                }
                Source::Table(t) => row.assign(&t.row(rng.random_range(0..t.nrows()))),
            }
        }
        out
    }
}

fn positive(v: usize, key: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{key} must be positive")));
    }
    Ok(())
}

/// Unit-variance components on a circle in the first two coordinates
/// (a line when `D = 1`), neighbours `GMM_SEPARATION` apart.
fn mixture(k: usize, d: usize) -> Source {
    let mut centers = Array2::zeros((k, d));
    if d == 1 || k == 1 {
        for c in 0..k {
            centers[(c, 0)] = c as f64 * GMM_SEPARATION;
        }
    } else {
        let radius = GMM_SEPARATION / (2.0 * (PI / k as f64).sin());
        for c in 0..k {
            let a = 2.0 * PI * c as f64 / k as f64;
            centers[(c, 0)] = radius * a.cos();
            centers[(c, 1)] = radius * a.sin();
        }
    }
    let mean = centers.mean_axis(Axis(0)).expect("k > 0");
    let spread = centers.var_axis(Axis(0), 0.0);
    let scale = spread.mapv(|v| (v + 1.0).sqrt());
    Source::Mixture {
        centers,
        mean,
        scale,
    }
}

fn read_table(path: &Path, rows: usize, dim: usize) -> Result<Array2<f64>> {
    if rows == 0 || dim == 0 {
        return Err(Error::Config(
            "tiny-image needs positive data.rows and data.dim".into(),
        ));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * dim * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {rows}×{dim} f64, found {}",
            path.display(),
            rows * dim * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), values).expect("length checked"))
}

fn standardize(mut table: Array2<f64>) -> Array2<f64> {
    let mean = table.mean_axis(Axis(0)).expect("rows > 0");
    let std = table
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    table -= &mean;
    table /= &std;
    table
}

/// Deterministic infinite stream of data vectors.
#[derive(Debug, Clone)]
pub struct DataStream {
    dataset: Dataset,
    rng: ChaCha8Rng,
}

impl Iterator for DataStream {
    type Item = Array1<f64>;

    fn next(&mut self) -> Option<Array1<f64>> {
        Some(self.dataset.sample(&mut self.rng, 1).row(0).to_owned())
    }
}

pub fn make_dataset(spec: DatasetSpec, seed: u64) -> Result<DataStream> {
    Ok(DataStream {
        dataset: Dataset::new(spec)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}
