//! Sample-based distribution distances and training diagnostics.

use std::path::Path;

use ndarray::{Array1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kl_basis::KlBasis;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub sliced_wasserstein_se: f64,
    pub variance_deficit: Vec<f64>,
    pub wall_time_s: f64,
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Validation("sample sets must be nonempty".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance over all ordered pairs.
fn mean_pair_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let row_sums: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            b.outer_iter()
                .map(|y| {
                    x.iter()
                        .zip(y.iter())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum()
        })
        .collect();
    row_sums.iter().sum::<f64>() / (a.nrows() * b.nrows()) as f64
}

/// `2E‖a-b‖ - E‖a-a'‖ - E‖b-b'‖` over all pairs (V-statistic).
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let ab = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// 1-D Wasserstein-1 between two empirical distributions, `∫|F_a - F_b|`.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicedWasserstein {
    pub value: f64,
    /// Standard error over projections.
    pub se: f64,
}

pub fn sliced_wasserstein_with_se(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_proj: usize,
    seed: u64,
) -> Result<SlicedWasserstein> {
    check_pair(a, b)?;
    if n_proj == 0 {
        return Err(Error::Config(
            "number of projections must be positive".into(),
        ));
    }
    let d = a.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Array1<f64>> = (0..n_proj)
        .map(|_| loop {
            let v = Array1::<f64>::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                break v / norm;
            }
        })
        .collect();
    let values: Vec<f64> = directions
        .par_iter()
        .map(|u| wasserstein_1d(a.dot(u).to_vec(), b.dot(u).to_vec()))
        .collect();
    let n = n_proj as f64;
    let value = values.iter().sum::<f64>() / n;
    let se = if n_proj > 1 {
        (values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(SlicedWasserstein { value, se })
}

pub fn sliced_wasserstein(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    Ok(sliced_wasserstein_with_se(a, b, n_proj, seed)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdComparison {
    pub steps_a: Option<u64>,
    pub steps_b: Option<u64>,
    /// `steps_a / steps_b` when both runs cross the threshold.
    pub ratio: Option<f64>,
}

/// `(step, value)` pairs of one metric column, skipping rows where it is empty.
pub fn read_metric(path: &Path, column: &str) -> Result<Vec<(u64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: no `{name}` column", path.display())))
    };
    let step_col = find("step")?;
    let metric_col = find(column)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let cell = record.get(metric_col).unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        let parse_err =
            |what: &str, v: &str| Error::Format(format!("{}: bad {what} `{v}`", path.display()));
        let step_cell = record.get(step_col).unwrap_or("").trim();
        let step = step_cell
            .parse()
            .map_err(|_| parse_err("step", step_cell))?;
        let value = cell.parse().map_err(|_| parse_err(column, cell))?;
        out.push((step, value));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn first_crossing(series: &[(u64, f64)], threshold: f64) -> Option<u64> {
    series
        .iter()
        .find(|(_, v)| *v <= threshold)
        .map(|(s, _)| *s)
}

pub fn steps_to_threshold(
    metrics_a: &Path,
    metrics_b: &Path,
    threshold: f64,
    column: &str,
) -> Result<ThresholdComparison> {
    let steps_a = first_crossing(&read_metric(metrics_a, column)?, threshold);
    let steps_b = first_crossing(&read_metric(metrics_b, column)?, threshold);
    let ratio = match (steps_a, steps_b) {
        (Some(a), Some(b)) if b > 0 => Some(a as f64 / b as f64),
        (Some(0), Some(0)) => Some(1.0),
        _ => None,
    };
    Ok(ThresholdComparison {
        steps_a,
        steps_b,
        ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderRow {
    pub m_terms: usize,
    pub t: f64,
    pub response_variance: f64,
    pub sigma2: f64,
    /// `1 - Σh²/σ²`, zero where `σ = 0`.
    pub deficit_ratio: f64,
}

pub fn variance_ladder(
    schedule: &NoiseSchedule,
    ms: &[usize],
    times: &[f64],
) -> Result<Vec<LadderRow>> {
    if ms.is_empty() || ms.windows(2).any(|w| w[0] >= w[1]) || ms[0] == 0 {
        return Err(Error::Config(
            "M values must be positive and strictly ascending".into(),
        ));
    }
    for &t in times {
        crate::error::check_time(t)?;
    }
    // h is evaluated on demand at arbitrary t, so no table is needed
    let basis = KlBasis::new(schedule.with_steps(1)?, 1)?;
    let largest = *ms.last().expect("nonempty");
    let mut rows = Vec::with_capacity(ms.len() * times.len());
    for &t in times {
        let h2: Vec<f64> = (1..=largest)
            .map(|m| basis.h(m, t).map(|h| h * h))
            .collect::<Result<_>>()?;
        let sigma2 = schedule.sigma_at(t).powi(2);
        for &m in ms {
            let response: f64 = h2[..m].iter().sum();
            let deficit_ratio = if sigma2 > 0.0 {
                1.0 - response / sigma2
            } else {
                0.0
            };
            rows.push(LadderRow {
                m_terms: m,
                t,
                response_variance: response,
                sigma2,
                deficit_ratio,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Axis};
    use std::io::Write;

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            shift + v
        })
    }

    #[test]
    fn energy_distance_properties() {
        let a = gaussian(500, 2, 0.0, 1);
        assert_eq!(energy_distance(a.view(), a.view()).unwrap(), 0.0);
        let b = gaussian(400, 2, 0.5, 2);
        let ab = energy_distance(a.view(), b.view()).unwrap();
        let ba = energy_distance(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let mut rev = a.clone();
        rev.invert_axis(Axis(0));
        let shuffled = energy_distance(rev.view(), b.view()).unwrap();
        assert!((shuffled - ab).abs() < 1e-12);
        assert!(energy_distance(a.view(), gaussian(3, 3, 0.0, 1).view()).is_err());
    }

    #[test]
    fn energy_distance_detects_shift() {
        let a = gaussian(10_000, 1, 0.0, 3);
        let same = energy_distance(a.view(), gaussian(10_000, 1, 0.0, 4).view()).unwrap();
        let far = energy_distance(a.view(), gaussian(10_000, 1, 3.0, 5).view()).unwrap();
        assert!(far > 10.0 * same, "{far} vs {same}");
    }

    #[test]
    fn sliced_wasserstein_basics() {
        let a = gaussian(300, 3, 0.0, 6);
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 32, 0).unwrap(), 0.0);
        let zeros = Array2::zeros((50, 1));
        let shifted = Array2::from_elem((70, 1), 2.5);
        let w = sliced_wasserstein(zeros.view(), shifted.view(), 8, 1).unwrap();
        assert!((w - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unequal_size_w1_matches_quantile_formula() {
        // a: {0, 1}; b: {0, 0.5, 1}: ∫|F_a - F_b| = 1/6
        let w = wasserstein_1d(vec![0.0, 1.0], vec![0.0, 0.5, 1.0]);
        assert!((w - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn sliced_wasserstein_seed_stability() {
        let a = gaussian(10_000, 2, 0.0, 7);
        let b = gaussian(10_000, 2, 0.3, 8);
        let x = sliced_wasserstein_with_se(a.view(), b.view(), 128, 1).unwrap();
        let y = sliced_wasserstein_with_se(a.view(), b.view(), 128, 2).unwrap();
        let se = (x.se * x.se + y.se * y.se).sqrt();
        assert!((x.value - y.value).abs() < 3.0 * se, "{x:?} {y:?}");
    }

    fn write_csv(path: &Path, rows: &[(u64, Option<f64>)]) {
        let mut f = std::fs::File::create(path).unwrap();
        writeln!(f, "# config_hash=abc").unwrap();
        writeln!(f, "step,loss,sliced_wasserstein").unwrap();
        for (s, v) in rows {
            let cell = v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{s},1.0,{cell}").unwrap();
        }
    }

    #[test]
    fn threshold_crossings() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let rows = [
            (100, Some(0.5)),
            (150, None),
            (200, Some(0.3)),
            (300, Some(0.1)),
        ];
        write_csv(&a, &rows);
        let same = steps_to_threshold(&a, &a, 0.3, "sliced_wasserstein").unwrap();
        assert_eq!(same.ratio, Some(1.0));
        let halved: Vec<_> = rows.iter().map(|(s, v)| (s / 2, *v)).collect();
        write_csv(&b, &halved);
        let cmp = steps_to_threshold(&a, &b, 0.3, "sliced_wasserstein").unwrap();
        assert_eq!(
            (cmp.steps_a, cmp.steps_b, cmp.ratio),
            (Some(200), Some(100), Some(2.0))
        );
        let none = steps_to_threshold(&a, &b, 0.01, "sliced_wasserstein").unwrap();
        assert_eq!(none.ratio, None);

        std::fs::write(&b, "step,sliced_wasserstein\nx,1\n").unwrap();
        assert!(matches!(
            steps_to_threshold(&a, &b, 0.3, "sliced_wasserstein"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn ladder_is_monotone_and_zero_at_origin() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rows = variance_ladder(&sched, &[8, 16, 32, 64], &times).unwrap();
        for chunk in rows.chunks(4) {
            if chunk[0].t == 0.0 {
                assert!(chunk
                    .iter()
                    .all(|r| r.response_variance == 0.0 && r.deficit_ratio == 0.0));
                continue;
            }
            for w in chunk.windows(2) {
                assert!(w[1].deficit_ratio < w[0].deficit_ratio);
                assert!(w[1].response_variance <= w[1].sigma2);
            }
        }
        assert!(variance_ladder(&sched, &[16, 8], &times).is_err());
    }
}
