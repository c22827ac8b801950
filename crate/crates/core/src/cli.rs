//! Command-line entry point shared by the `kldiff` binary and tests.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SweepMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    energy_distance, read_metric, sliced_wasserstein_with_se, steps_to_threshold, variance_ladder,
    DEFAULT_PROJECTIONS,
};
use crate::forward::{sample_kl_approx, ForwardSample};
use crate::kl_basis::{Basis, KlBasis};
use crate::matrix::{read_matrix, write_matrix, MatrixMeta};
use crate::sampler::{sample, GaussOracle, PredictorKind, SamplerConfig};
use crate::trainer::{
    check_architecture, finetune_init, stream_rng, TrainConfig, TrainState, Trainer,
    REFERENCE_STREAM,
};

const SIMULATE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Parser)]
#[command(name = "kldiff", version, about = "KL-expansion diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PathArg {
    Marginal,
    KlApprox,
    KlExact,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PredictorArg {
    Baseline,
    Kl1,
    Kl2,
    OracleGauss,
    /// Draw rows from the configured dataset (reference sets).
    Data,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate φ_m(t_k) and h_m(t_k) on the time grid.
    Basis {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw forward-process states at grid step k.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "kl-approx")]
        path: PathArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "finetune_from")]
        resume: Option<PathBuf>,
        #[arg(long)]
        finetune_from: Option<PathBuf>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate samples with DDIM.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_enum)]
        predictor: Option<PredictorArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated and reference samples, or two metric logs.
    Eval {
        #[arg(long, requires = "reference", conflicts_with = "compare")]
        gen: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Two metrics.csv files for a steps-to-threshold comparison.
        #[arg(long, num_args = 2, requires = "threshold")]
        compare: Option<Vec<PathBuf>>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "sliced_wasserstein")]
        metric: String,
        #[arg(long, default_value_t = DEFAULT_PROJECTIONS)]
        projections: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance of the exact truncated state against σ(t)² for several M.
    VarianceLadder {
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
        m: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid of (M, N) cells with identical seeds and budgets.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("KLDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// CSV writer whose first line is `# config_hash=<hash>`.
fn hashed_csv(path: &Path, hash: &str, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# config_hash={hash}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    Ok(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, mut w: csv::Writer<fs::File>, rows: Vec<Vec<String>>) -> Result<()> {
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Basis { config, out } => basis_table(&load_config(config.as_deref())?, &out),
        Command::Simulate {
            config,
            n,
            k,
            path,
            out,
        } => simulate(&load_config(config.as_deref())?, n, k, path, &out),
        Command::Train {
            config,
            resume,
            finetune_from,
            out_dir,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                run.out_dir = dir;
            }
            train(&run, resume.as_deref(), finetune_from.as_deref()).map(|_| ())
        }
        Command::Sample {
            ckpt,
            config,
            n,
            steps,
            eta,
            predictor,
            seed,
            out,
        } => sample_cmd(
            ckpt.as_deref(),
            config.as_deref(),
            n,
            steps,
            eta,
            predictor,
            seed,
            &out,
        ),
        Command::Eval {
            gen,
            reference,
            compare,
            threshold,
            metric,
            projections,
            seed,
            out,
        } => match (gen, reference, compare) {
            (Some(g), Some(r), None) => eval_samples(&g, &r, projections, seed, &out),
            (None, None, Some(pair)) => compare_runs(
                &pair[0],
                &pair[1],
                threshold.expect("required by clap"),
                &metric,
                &out,
            ),
            _ => Err(Error::Config(
                "eval needs --gen and --ref, or --compare".into(),
            )),
        },
        Command::VarianceLadder { m, config, out } => {
            let run = load_config(config.as_deref())?;
            ladder(&run, &m, &out)
        }
        Command::Sweep { config, out_dir } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                run.out_dir = dir;
            }
            sweep(&run).map(|_| ())
        }
    }
}

fn basis_table(run: &RunConfig, out: &Path) -> Result<()> {
    let basis = KlBasis::with_panels(run.schedule()?, run.m_terms, run.quadrature_panels)?;
    let w = hashed_csv(out, &run.hash(), &["k", "t", "m", "phi", "h"])?;
    let mut rows = Vec::new();
    for k in 0..=basis.n_steps() {
        let t = basis.schedule().time(k)?;
        for m in 1..=basis.m_terms() {
            rows.push(vec![
                k.to_string(),
                t.to_string(),
                m.to_string(),
                basis.weight(m, t).to_string(),
                basis.h_at(m, k)?.to_string(),
            ]);
        }
    }
    write_rows(out, w, rows)
}

fn simulate(run: &RunConfig, n: usize, k: usize, path: PathArg, out: &Path) -> Result<()> {
    let sched = run.schedule()?;
    sched.check_index(k)?;
    let data = Dataset::new(run.dataset()?)?;
    let basis = match path {
        PathArg::Marginal => None,
        _ => Some(KlBasis::with_panels(
            sched,
            run.m_terms,
            run.quadrature_panels,
        )?),
    };
    let mut rng = stream_rng(run.seed, SIMULATE_STREAM);
    let x0 = data.sample(&mut rng, n);
    let d = data.dim();
    let mut xt = Array2::zeros((n, d));
    for (i, row) in x0.rows().into_iter().enumerate() {
        let s = match (path, &basis) {
            (PathArg::Marginal, _) => {
                let eps = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
                ForwardSample::marginal(&sched, row.to_owned(), k, eps)?
            }
            (PathArg::KlApprox, Some(b)) => {
                let z = Array2::from_shape_simple_fn((run.m_terms, d), || {
                    StandardNormal.sample(&mut rng)
                });
                sample_kl_approx(b, row.to_owned(), k, z)?
            }
            (PathArg::KlExact, Some(b)) => {
                let z = Array2::from_shape_simple_fn((run.m_terms, d), || {
                    StandardNormal.sample(&mut rng)
                });
                ForwardSample::exact(b, row.to_owned(), k, z)?
            }
            _ => unreachable!("basis built for KL paths"),
        };
        xt.row_mut(i).assign(&s.xt);
    }
    create_parent(out)?;
    let meta = MatrixMeta {
        rows: n,
        cols: d,
        seed: run.seed,
        config_hash: run.hash(),
        source: format!("simulate-{path:?}-k{k}").to_lowercase(),
        sampler_steps: None,
        eta: None,
    };
    write_matrix(out, xt.view(), &meta)
}

/// Train per `run`, writing `metrics.csv`, checkpoints and the resolved
/// config under `run.out_dir`.
pub fn train(run: &RunConfig, resume: Option<&Path>, finetune: Option<&Path>) -> Result<PathBuf> {
    let config = TrainConfig::from_run(run)?;
    let dir = run.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join("config.resolved");
    fs::write(
        &resolved,
        format!("# config_hash={}\n{}", run.hash(), run.to_text()),
    )
    .map_err(|e| Error::io(&resolved, e))?;
    let mut trainer = match (resume, finetune) {
        (Some(p), _) => Trainer::from_checkpoint(config, &Checkpoint::load(p)?)?,
        (None, Some(p)) => {
            let base = Checkpoint::load(p)?;
            let params = finetune_init(&base, config.loss_kind, config.m_terms, config.n_steps)?;
            check_architecture(&params, &config)?;
            Trainer::with_state(config, TrainState::fresh(params))?
        }
        (None, None) => Trainer::new(config)?,
    };
    let summary = trainer.run(Some(&dir))?;
    log::info!(
        "finished at step {} with loss {}",
        summary.final_step,
        summary.last_loss
    );
    summary
        .checkpoint
        .ok_or_else(|| Error::Config("train.total_steps is already reached; nothing to do".into()))
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    n: usize,
    steps: Option<usize>,
    eta: Option<f64>,
    predictor: Option<PredictorArg>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    create_parent(out)?;
    let run = load_config(config)?;
    let seed = seed.unwrap_or(run.seed);
    if let Some(PredictorArg::Data) = predictor {
        let data = Dataset::new(run.dataset()?)?;
        let rows = data.sample(&mut stream_rng(seed, REFERENCE_STREAM), n);
        let meta = MatrixMeta {
            rows: n,
            cols: data.dim(),
            seed,
            config_hash: run.hash(),
            source: "data".into(),
            sampler_steps: None,
            eta: None,
        };
        return write_matrix(out, rows.view(), &meta);
    }
    let sampler = |kind: PredictorKind| SamplerConfig {
        subset_size: steps.unwrap_or(run.sampler_steps),
        eta: eta.unwrap_or(run.sampler_eta),
        predictor: kind,
        seed,
    };
    let (generated, hash, cfg) = match ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let kind = match predictor {
                Some(p) => to_kind(p),
                None => ck.default_predictor()?,
            };
            let cfg = sampler(kind);
            let generated = ck.sample(n, &cfg)?;
            (generated, ck.header.config_hash.clone(), cfg)
        }
        None => {
            let kind = predictor.map(to_kind).unwrap_or(PredictorKind::OracleGauss);
            if kind != PredictorKind::OracleGauss {
                return Err(Error::Config(format!(
                    "predictor {} needs --ckpt",
                    kind.name()
                )));
            }
            let cfg = sampler(kind);
            let sched = run.schedule()?;
            let d = run.dataset()?.dim();
            (
                sample(n, d, &sched, &cfg, &GaussOracle(sched))?,
                run.hash(),
                cfg,
            )
        }
    };
    let meta = MatrixMeta {
        rows: generated.nrows(),
        cols: generated.ncols(),
        seed,
        config_hash: hash,
        source: cfg.predictor.name().into(),
        sampler_steps: Some(cfg.subset_size),
        eta: Some(cfg.eta),
    };
    write_matrix(out, generated.view(), &meta)
}

fn to_kind(p: PredictorArg) -> PredictorKind {
    match p {
        PredictorArg::Baseline => PredictorKind::Baseline,
        PredictorArg::Kl1 => PredictorKind::Kl1,
        PredictorArg::Kl2 => PredictorKind::Kl2,
        PredictorArg::OracleGauss | PredictorArg::Data => PredictorKind::OracleGauss,
    }
}

fn eval_samples(
    gen: &Path,
    reference: &Path,
    projections: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (g, gm) = read_matrix(gen)?;
    let (r, rm) = read_matrix(reference)?;
    if gm.config_hash != rm.config_hash {
        log::warn!(
            "generated ({}) and reference ({}) come from different configs",
            gm.config_hash,
            rm.config_hash
        );
    }
    let ed = energy_distance(g.view(), r.view())?;
    let sw = sliced_wasserstein_with_se(g.view(), r.view(), projections, seed)?;
    let w = hashed_csv(
        out,
        &gm.config_hash,
        &[
            "energy_distance",
            "sliced_wasserstein",
            "sliced_wasserstein_se",
            "n_gen",
            "n_ref",
            "projections",
            "seed",
            "ref_config_hash",
        ],
    )?;
    let row = vec![
        ed.to_string(),
        sw.value.to_string(),
        sw.se.to_string(),
        g.nrows().to_string(),
        r.nrows().to_string(),
        projections.to_string(),
        seed.to_string(),
        rm.config_hash,
    ];
    write_rows(out, w, vec![row])
}

fn compare_runs(a: &Path, b: &Path, threshold: f64, metric: &str, out: &Path) -> Result<()> {
    let hash_of = |p: &Path| -> Result<String> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# config_hash="))
            .unwrap_or("unknown")
            .to_string())
    };
    let cmp = steps_to_threshold(a, b, threshold, metric)?;
    let fmt = |v: Option<u64>| v.map_or("not reached".to_string(), |s| s.to_string());
    let w = hashed_csv(
        out,
        &hash_of(a)?,
        &[
            "threshold",
            "metric",
            "steps_a",
            "steps_b",
            "ratio",
            "config_hash_b",
        ],
    )?;
    let row = vec![
        threshold.to_string(),
        metric.to_string(),
        fmt(cmp.steps_a),
        fmt(cmp.steps_b),
        cmp.ratio
            .map_or("not reached".to_string(), |r| r.to_string()),
        hash_of(b)?,
    ];
    write_rows(out, w, vec![row])
}

fn ladder(run: &RunConfig, ms: &[usize], out: &Path) -> Result<()> {
    let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = variance_ladder(&run.schedule()?, ms, &times)?;
    let w = hashed_csv(
        out,
        &run.hash(),
        &[
            "m_terms",
            "t",
            "response_variance",
            "sigma2",
            "deficit_ratio",
        ],
    )?;
    let rows = rows
        .into_iter()
        .map(|r| {
            vec![
                r.m_terms.to_string(),
                r.t.to_string(),
                r.response_variance.to_string(),
                r.sigma2.to_string(),
                r.deficit_ratio.to_string(),
            ]
        })
        .collect();
    write_rows(out, w, rows)
}

/// `(M, N)` with `M·N = product` and `M ≤ N`, largest `M` first.
pub fn product_grid(product: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (1..=product)
        .filter(|m| product.is_multiple_of(*m) && m * m <= product)
        .map(|m| (m, product / m))
        .collect();
    cells.reverse();
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub m_terms: usize,
    pub n_steps: usize,
    pub config_hash: String,
    pub best: Option<(u64, f64)>,
    pub last: Option<f64>,
    pub steps_to_threshold: Option<u64>,
}

/// Train every cell and write `summary.csv` under `run.out_dir`.
pub fn sweep(run: &RunConfig) -> Result<Vec<SweepCell>> {
    if run.eval_every == 0 {
        return Err(Error::Config("sweep needs train.eval_every > 0".into()));
    }
    let cells: Vec<(usize, usize)> = match run.sweep_mode {
        SweepMode::FixedN => {
            let n = run.resolved_n_steps();
            run.sweep_m_values.iter().map(|&m| (m, n)).collect()
        }
        SweepMode::FixedProduct => product_grid(run.sweep_product),
    };
    let mut results = Vec::with_capacity(cells.len());
    for (m, n) in cells {
        let mut cell = run.clone();
        cell.m_terms = m;
        cell.n_steps = Some(n);
        if let Some(p) = cell.partial_terms {
            cell.partial_terms = Some(p.min(m));
        }
        cell.out_dir = run.out_dir.join(format!("cell-m{m}-n{n}"));
        log::info!("sweep cell M={m} N={n}");
        train(&cell, None, None)?;
        let series = read_metric(&cell.out_dir.join("metrics.csv"), "sliced_wasserstein")?;
        let best = series.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1));
        results.push(SweepCell {
            m_terms: m,
            n_steps: n,
            config_hash: cell.hash(),
            best,
            last: series.last().map(|s| s.1),
            steps_to_threshold: None,
        });
    }
    let threshold = run.eval_threshold.unwrap_or_else(|| {
        results
            .iter()
            .filter_map(|c| c.best.map(|b| b.1))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    for c in results.iter_mut() {
        let path = run
            .out_dir
            .join(format!("cell-m{}-n{}", c.m_terms, c.n_steps))
            .join("metrics.csv");
        c.steps_to_threshold =
            crate::eval::first_crossing(&read_metric(&path, "sliced_wasserstein")?, threshold);
    }
    let out = run.out_dir.join("summary.csv");
    let w = hashed_csv(
        &out,
        &run.hash(),
        &[
            "m_terms",
            "n_steps",
            "cell_config_hash",
            "best_step",
            "best_sliced_wasserstein",
            "final_sliced_wasserstein",
            "threshold",
            "steps_to_threshold",
        ],
    )?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "not reached".into());
    let rows = results
        .iter()
        .map(|c| {
            vec![
                c.m_terms.to_string(),
                c.n_steps.to_string(),
                c.config_hash.clone(),
                opt(c.best.map(|b| b.0.to_string())),
                opt(c.best.map(|b| b.1.to_string())),
                opt(c.last.map(|v| v.to_string())),
                threshold.to_string(),
                opt(c.steps_to_threshold.map(|s| s.to_string())),
            ]
        })
        .collect();
    write_rows(&out, w, rows)?;
    Ok(results)
}
