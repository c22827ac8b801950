//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p kldiff --test acceptance`; pass criterion numbers
//! after `--` to run a subset, e.g. `-- 1 2 7`.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use kldiff::config::RunConfig;
use kldiff::denoiser::{DenoiserConfig, DenoiserParams, HeadInit};
use kldiff::eval::{read_metric, steps_to_threshold};
use kldiff::forward::{kl_derivative, sample_kl_approx, ForwardSample};
use kldiff::kl_basis::{numeric_kl, phi, phi_sup, CovarianceKernel};
use kldiff::loss::{
    baseline_loss, deriv_match_loss, kl2nd_loss, kl_loss, kl_partial_loss, LossBatch, LossKind,
    Objective,
};
use kldiff::quadrature::simpson;
use kldiff::sampler::{aggregate_kl2nd, sample, GaussOracle, SamplerConfig};
use kldiff::trainer::{finetune_init, TrainConfig, Trainer};
use kldiff::{Basis, KlBasis, NoiseSchedule};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn variance_convergence() -> Check {
    let sched = NoiseSchedule::linear(10).map_err(|e| e.to_string())?;
    let times: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let mut prev = vec![0.0; times.len()];
    let mut monotone = true;
    let mut bounded = true;
    let mut deficit = 0.0;
    for m in [8, 16, 32, 64] {
        let basis = KlBasis::new(sched, m).map_err(|e| e.to_string())?;
        for (i, &t) in times.iter().enumerate() {
            let v = basis.response_variance(i + 1).map_err(|e| e.to_string())?;
            let s2 = sched.sigma(t).map_err(|e| e.to_string())?.powi(2);
            monotone &= v >= prev[i];
            bounded &= v <= s2 + 1e-12;
            prev[i] = v;
            if m == 64 && i == times.len() - 1 {
                deficit = 1.0 - v / s2;
            }
        }
    }
    ensure(
        monotone && bounded && deficit < 0.02,
        format!(
            "monotone={monotone} bounded={bounded} M=64 deficit at t=1 = {:.4}% (bound 2%)",
            100.0 * deficit
        ),
    )
}

fn basis_identities() -> Check {
    let mut worst_ip: f64 = 0.0;
    for i in 1..=16 {
        for j in (i + 1)..=16 {
            let ip = simpson(|t| phi(i, t).unwrap() * phi(j, t).unwrap(), 0.0, 1.0, 8192);
            worst_ip = worst_ip.max(ip.abs());
        }
    }
    let fine = 200_000;
    let mut worst_sup: f64 = 0.0;
    for m in 1..=16 {
        let sup = (0..=fine)
            .map(|i| phi(m, i as f64 / fine as f64).unwrap().abs())
            .fold(0.0, f64::max);
        let law = 2.0 * SQRT_2 / ((2 * m - 1) as f64 * PI);
        worst_sup = worst_sup
            .max((sup - law).abs())
            .max((phi_sup(m).unwrap() - law).abs());
    }
    let partial: f64 = (1..=8).map(|m| phi(m, 0.5).unwrap().powi(2)).sum();
    let mut worst_cov: f64 = 0.0;
    for i in 0..=32 {
        for j in 0..=32 {
            let (s, t) = (i as f64 / 32.0, j as f64 / 32.0);
            let approx: f64 = (1..=128)
                .map(|m| phi(m, s).unwrap() * phi(m, t).unwrap())
                .sum();
            worst_cov = worst_cov.max((approx - s.min(t)).abs());
        }
    }
    ensure(
        worst_ip < 1e-8 && worst_sup < 1e-10 && (partial - 0.48735).abs() < 1e-4 && worst_cov < 0.02,
        format!(
            "max |<φi,φj>| = {worst_ip:.1e}, sup-law error = {worst_sup:.1e}, Σφ²(0.5) = {partial:.6}, cov error = {worst_cov:.4}"
        ),
    )
}

fn numeric_eigenpairs() -> Check {
    let kl = numeric_kl(&CovarianceKernel::brownian(512), 4).map_err(|e| e.to_string())?;
    let (mut worst_val, mut worst_fn): (f64, f64) = (0.0, 0.0);
    for m in 1..=4 {
        let w = (2 * m - 1) as f64 * PI / 2.0;
        let exact = 1.0 / (w * w);
        worst_val = worst_val.max((kl.eigenvalues[m - 1] - exact).abs() / exact);
        let sup = kl
            .grid
            .iter()
            .zip(kl.eigenfunctions.row(m - 1))
            .map(|(&t, &v)| (v - SQRT_2 * (w * t).sin()).abs())
            .fold(0.0f64, f64::max);
        worst_fn = worst_fn.max(sup);
    }
    ensure(
        worst_val < 0.01 && worst_fn < 2e-2,
        format!("eigenvalue rel error {worst_val:.2e}, eigenfunction sup error {worst_fn:.2e}"),
    )
}

fn ode_closed_form() -> Check {
    let sched = NoiseSchedule::linear(20).map_err(|e| e.to_string())?;
    let basis = KlBasis::new(sched, 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let steps = 4000;
    let dt = 1.0 / steps as f64;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x0 = normal(&mut rng, 1, 2).row(0).to_owned();
        let z = normal(&mut rng, 8, 2);
        let f = |t: f64, x: &Array1<f64>| {
            kl_derivative(&sched, x.view(), t.min(1.0), z.view()).unwrap()
        };
        let mut x = x0.clone();
        for i in 0..steps {
            let t = i as f64 * dt;
            let k1 = f(t, &x);
            let k2 = f(t + dt / 2.0, &(&x + &(&k1 * (dt / 2.0))));
            let k3 = f(t + dt / 2.0, &(&x + &(&k2 * (dt / 2.0))));
            let k4 = f(t + dt, &(&x + &(&k3 * dt)));
            x = &x + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0));
        }
        let closed = ForwardSample::exact(&basis, x0, 20, z)
            .map_err(|e| e.to_string())?
            .xt;
        let rel = (&x - &closed).mapv(|v| v * v).sum().sqrt() / closed.mapv(|v| v * v).sum().sqrt();
        worst = worst.max(rel);
    }
    ensure(
        worst < 1e-5,
        format!("max relative error at t=1 over 10 draws = {worst:.2e}"),
    )
}

fn mlp(channels: usize, max_index: usize, head: HeadInit, seed: u64) -> DenoiserParams {
    let cfg = DenoiserConfig::new(2, max_index);
    DenoiserParams::init(&cfg, channels, head, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn approx_batch(
    basis: &KlBasis,
    objective: Objective,
    k: Option<usize>,
    n: usize,
    seed: u64,
) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = basis.m_terms();
    let samples = (0..n)
        .map(|_| {
            let x0 = normal(&mut rng, 1, 2).row(0).to_owned();
            let k = k.unwrap_or_else(|| rng.random_range(1..=basis.n_steps()));
            sample_kl_approx(basis, x0, k, normal(&mut rng, m, 2)).unwrap()
        })
        .collect();
    LossBatch::new(samples, objective)
}

fn marginal_batch(sched: &NoiseSchedule, k: Option<usize>, n: usize, seed: u64) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let x0 = normal(&mut rng, 1, 2).row(0).to_owned();
            let eps = normal(&mut rng, 1, 2).row(0).to_owned();
            let k = k.unwrap_or_else(|| rng.random_range(1..=sched.n_steps));
            ForwardSample::marginal(sched, x0, k, eps).unwrap()
        })
        .collect();
    LossBatch::new(samples, Objective::Baseline)
}

/// Worst relative error between a five-point central difference and the
/// analytic gradient over 50 randomly chosen parameters.
fn fd_check<F: Fn(&DenoiserParams) -> (f64, Vec<f64>)>(p: &DenoiserParams, f: F, seed: u64) -> f64 {
    let (_, grad) = f(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.random_range(0..p.flat_params.len());
        let at = |delta: f64| {
            let mut q = p.clone();
            q.flat_params[i] += delta;
            f(&q).0
        };
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
    }
    worst
}

fn gradient_correctness() -> Check {
    let (n, m) = (20, 8);
    let sched = NoiseSchedule::linear(n).map_err(|e| e.to_string())?;
    let basis = KlBasis::new(sched, m).map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    let full = approx_batch(&basis, Objective::KlFull, None, 8, 1);
    report.push((
        "kl_full",
        fd_check(
            &mlp(1, n * m, HeadInit::Random, 1),
            |q| kl_loss(q, &full, &basis).unwrap(),
            11,
        ),
    ));
    let sel = vec![1, 3, 6];
    let partial = approx_batch(&basis, Objective::KlPartial(sel.clone()), None, 8, 2);
    report.push((
        "kl_partial",
        fd_check(
            &mlp(1, n * m, HeadInit::Random, 2),
            |q| kl_partial_loss(q, &partial, &basis, &sel).unwrap(),
            12,
        ),
    ));
    let second = approx_batch(&basis, Objective::Kl2nd, None, 8, 3);
    report.push((
        "kl_2nd",
        fd_check(
            &mlp(m, n, HeadInit::Random, 3),
            |q| kl2nd_loss(q, &second, &basis).unwrap(),
            13,
        ),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let exact: Vec<_> = (0..8)
        .map(|_| {
            let x0 = normal(&mut rng, 1, 2).row(0).to_owned();
            let k = rng.random_range(1..=n);
            ForwardSample::exact(&basis, x0, k, normal(&mut rng, m, 2)).unwrap()
        })
        .collect();
    let deriv = LossBatch::new(exact, Objective::DerivMatch);
    report.push((
        "deriv_match",
        fd_check(
            &mlp(1, n, HeadInit::Random, 4),
            |q| deriv_match_loss(q, &deriv, &basis).unwrap(),
            14,
        ),
    ));
    let base = marginal_batch(&sched, None, 8, 5);
    report.push((
        "baseline",
        fd_check(
            &mlp(1, n, HeadInit::Random, 5),
            |q| baseline_loss(q, &base).unwrap(),
            15,
        ),
    ));
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = report
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst < 1e-4, format!("max relative FD error: {detail}"))
}

/// Mean and its standard error.
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn zero_head_golden() -> Check {
    let (n_steps, m, k, d) = (20, 8, 10, 2.0);
    let sched = NoiseSchedule::linear(n_steps).map_err(|e| e.to_string())?;
    let basis = KlBasis::new(sched, m).map_err(|e| e.to_string())?;
    let t = sched.time(k).map_err(|e| e.to_string())?;
    let phi_t = basis.weights(t);
    let n = 4000;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut judge = |name: &str, value: f64, per: &[f64], target: f64| {
        let (_, se) = mean_se(per);
        let pass = (value - target).abs() < 3.0 * se;
        ok &= pass;
        lines.push(format!(
            "{name} {value:.4} vs {target:.4} (3SE {:.4})",
            3.0 * se
        ));
    };

    let base = marginal_batch(&sched, Some(k), n, 21);
    let per: Vec<f64> = base
        .samples
        .iter()
        .map(|s| s.z_prime.dot(&s.z_prime))
        .collect();
    let (v, _) =
        baseline_loss(&mlp(1, n_steps, HeadInit::Zero, 1), &base).map_err(|e| e.to_string())?;
    judge("baseline", v, &per, d);

    let kl_target = phi_t.iter().map(|p| p * p).sum::<f64>() / t * d;
    let full = approx_batch(&basis, Objective::KlFull, Some(k), n, 22);
    let per: Vec<f64> = full
        .samples
        .iter()
        .map(|s| s.z_prime.dot(&s.z_prime))
        .collect();
    let (v, _) = kl_loss(&mlp(1, n_steps * m, HeadInit::Zero, 2), &full, &basis)
        .map_err(|e| e.to_string())?;
    judge("kl_full", v, &per, kl_target);

    let second = LossBatch::new(full.samples.clone(), Objective::Kl2nd);
    let (v, _) = kl2nd_loss(&mlp(m, n_steps, HeadInit::Zero, 3), &second, &basis)
        .map_err(|e| e.to_string())?;
    judge("kl_2nd", v, &per, kl_target);

    let sel = vec![2, 5, 7];
    let partial = approx_batch(&basis, Objective::KlPartial(sel.clone()), Some(k), n, 24);
    let per: Vec<f64> = partial
        .samples
        .iter()
        .map(|s| {
            sel.iter()
                .map(|&j| s.z.row(j - 1).dot(&s.z.row(j - 1)))
                .sum::<f64>()
                / t
        })
        .collect();
    let (v, _) = kl_partial_loss(
        &mlp(1, n_steps * m, HeadInit::Zero, 4),
        &partial,
        &basis,
        &sel,
    )
    .map_err(|e| e.to_string())?;
    judge("kl_partial", v, &per, sel.len() as f64 / t * d);
    ensure(ok, lines.join(", "))
}

fn sampler_oracle() -> Check {
    let sched = NoiseSchedule::linear(1000).map_err(|e| e.to_string())?;
    let oracle = GaussOracle(sched);
    let cfg = SamplerConfig {
        subset_size: 20,
        eta: 1.0,
        seed: 7,
        ..SamplerConfig::default()
    };
    let out = sample(10_000, 2, &sched, &cfg, &oracle).map_err(|e| e.to_string())?;
    let mean = out.mean_axis(Axis(0)).expect("nonempty");
    let var = out.var_axis(Axis(0), 0.0);
    let mean_ok = mean.iter().all(|v| v.abs() < 0.03);
    let var_ok = var.iter().all(|v| (0.94..=1.06).contains(v));
    let det = SamplerConfig { eta: 0.0, ..cfg };
    let a = sample(2000, 2, &sched, &det, &oracle).map_err(|e| e.to_string())?;
    let b = sample(2000, 2, &sched, &det, &oracle).map_err(|e| e.to_string())?;
    let bitwise = a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(
        mean_ok && var_ok && bitwise,
        format!("mean {mean:.4}, variance {var:.4} (band [0.94, 1.06]), η=0 bitwise deterministic: {bitwise}"),
    )
}

fn finetune_identity() -> Check {
    let run = RunConfig::parse("schedule.n_steps = 20\ntrain.total_steps = 5\nseed = 3\n")
        .map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(TrainConfig::from_run(&run).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    for _ in 0..5 {
        trainer.train_step().map_err(|e| e.to_string())?;
    }
    let ckpt = trainer.checkpoint();
    let base = ckpt.ema_model().map_err(|e| e.to_string())?;
    let m = 8;
    let wide = finetune_init(&ckpt, LossKind::Kl2nd, m, 20).map_err(|e| e.to_string())?;
    let basis = KlBasis::new(NoiseSchedule::linear(20).map_err(|e| e.to_string())?, m)
        .map_err(|e| e.to_string())?;
    let x = normal(&mut ChaCha8Rng::seed_from_u64(8), 64, 2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        if basis.weights(t).iter().sum::<f64>().abs() < 1e-6 {
            continue;
        }
        checked += 1;
        let agg = aggregate_kl2nd(&wide, x.view(), k, &basis).map_err(|e| e.to_string())?;
        let direct = base
            .forward_batch(x.view(), &vec![k; 64])
            .map_err(|e| e.to_string())?;
        worst = worst.max((&agg - &direct).iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    ensure(
        worst < 1e-12,
        format!("max |KL-2nd − baseline| = {worst:.1e} over {checked} grid steps"),
    )
}

fn train_run(text: &str, dir: &Path) -> Result<(), String> {
    let mut run = RunConfig::parse(text).map_err(|e| e.to_string())?;
    run.out_dir = dir.to_path_buf();
    let config = TrainConfig::from_run(&run).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(config).map_err(|e| e.to_string())?;
    trainer.run(Some(dir)).map_err(|e| e.to_string())?;
    Ok(())
}

fn final_metric(dir: &Path) -> Result<(f64, f64), String> {
    let path = dir.join("metrics.csv");
    let sw = read_metric(&path, "sliced_wasserstein").map_err(|e| e.to_string())?;
    let se = read_metric(&path, "sliced_wasserstein_se").map_err(|e| e.to_string())?;
    match (sw.last(), se.last()) {
        (Some(a), Some(b)) => Ok((a.1, b.1)),
        _ => Err(format!("{} has no evaluations", path.display())),
    }
}

const TOY_TASK: &str = "seed = 2024\n\
data.kind = gmm\ndata.components = 8\ndata.dim = 2\n\
train.batch_size = 64\ntrain.total_steps = 20000\ntrain.eval_every = 1000\n\
eval.samples = 1024\neval.repeats = 4\n";

fn speedup_trend() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (base_dir, kl_dir) = (tmp.path().join("baseline"), tmp.path().join("kl8"));
    train_run(&format!("{TOY_TASK}train.loss = baseline\n"), &base_dir)?;
    train_run(
        &format!("{TOY_TASK}train.loss = kl_full\nbasis.m_terms = 8\n"),
        &kl_dir,
    )?;
    let base_csv = base_dir.join("metrics.csv");
    let kl_csv = kl_dir.join("metrics.csv");
    let series = read_metric(&base_csv, "sliced_wasserstein").map_err(|e| e.to_string())?;
    let best = series.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let cmp = steps_to_threshold(&base_csv, &kl_csv, best, "sliced_wasserstein")
        .map_err(|e| e.to_string())?;
    let (fb, sb) = final_metric(&base_dir)?;
    let (fk, sk) = final_metric(&kl_dir)?;
    let tol = 3.0 * (sb * sb + sk * sk).sqrt();
    let ratio_ok = cmp.ratio.is_some_and(|r| r >= 1.0);
    let final_ok = fk <= fb + tol;
    let show = |v: Option<u64>| v.map_or("not reached".to_string(), |s| s.to_string());
    ensure(
        ratio_ok && final_ok,
        format!(
            "threshold {best:.4}: baseline step {}, KL-8 step {}, ratio {}; final SW baseline {fb:.4}, KL-8 {fk:.4} (3SE {tol:.4})",
            show(cmp.steps_a),
            show(cmp.steps_b),
            cmp.ratio.map_or("n/a".to_string(), |r| format!("{r:.2}")),
        ),
    )
}

fn partial_ordering() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut finals = Vec::new();
    for m_prime in [1, 4, 10] {
        let dir = tmp.path().join(format!("m{m_prime}"));
        train_run(
            &format!("{TOY_TASK}train.loss = kl_partial\nbasis.m_terms = 10\ntrain.partial_terms = {m_prime}\n"),
            &dir,
        )?;
        finals.push((m_prime, final_metric(&dir)?));
    }
    let ordered = finals
        .windows(2)
        .all(|w| w[1].1 .0 <= w[0].1 .0 + 3.0 * (w[0].1 .1.powi(2) + w[1].1 .1.powi(2)).sqrt());
    let detail = finals
        .iter()
        .map(|(m, (v, se))| format!("M'={m}: {v:.4} ± {se:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(ordered, format!("final SW {detail}"))
}

fn hash_line(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string)
        .ok_or_else(|| format!("{} has no config hash line", path.display()))
}

fn sidecar_hash(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v["config_hash"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| "sidecar without hash".into())
}

fn pipeline_smoke() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 11\nout_dir = {}\ntrain.loss = kl_full\ntrain.total_steps = 200\ntrain.eval_every = 100\neval.samples = 256\neval.repeats = 2\n",
            dir.join("run").display()
        ),
    )
    .map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_kldiff");
    let s = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let cfg_s = cfg.to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "basis".into(),
            "--config".into(),
            cfg_s.clone(),
            "--out".into(),
            s("basis.csv"),
        ],
        vec!["train".into(), "--config".into(), cfg_s.clone()],
        vec![
            "sample".into(),
            "--ckpt".into(),
            s("run/checkpoint.kld"),
            "--n".into(),
            "1024".into(),
            "--out".into(),
            s("gen.bin"),
        ],
        vec![
            "sample".into(),
            "--config".into(),
            cfg_s,
            "--predictor".into(),
            "data".into(),
            "--n".into(),
            "1024".into(),
            "--out".into(),
            s("ref.bin"),
        ],
        vec![
            "eval".into(),
            "--gen".into(),
            s("gen.bin"),
            "--ref".into(),
            s("ref.bin"),
            "--out".into(),
            s("report.csv"),
        ],
    ];
    for args in &steps {
        let status = Command::new(bin)
            .args(args)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("`kldiff {}` exited with {status}", args[0]));
        }
    }
    let hashes = [
        hash_line(&dir.join("basis.csv"))?,
        hash_line(&dir.join("run/metrics.csv"))?,
        kldiff::checkpoint::Checkpoint::load(&dir.join("run/checkpoint.kld"))
            .map_err(|e| e.to_string())?
            .header
            .config_hash,
        sidecar_hash(&dir.join("gen.bin.json"))?,
        sidecar_hash(&dir.join("ref.bin.json"))?,
        hash_line(&dir.join("report.csv"))?,
    ];
    let agree = hashes.iter().all(|h| h == &hashes[0]);
    ensure(
        agree,
        format!(
            "all exit codes 0, {} config hashes agree: {agree}",
            hashes.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "variance convergence",
            budget: Duration::from_secs(10),
            run: variance_convergence,
        },
        Criterion {
            id: 2,
            name: "basis identities",
            budget: Duration::from_secs(10),
            run: basis_identities,
        },
        Criterion {
            id: 3,
            name: "numeric KL eigenpairs",
            budget: Duration::from_secs(30),
            run: numeric_eigenpairs,
        },
        Criterion {
            id: 4,
            name: "ODE / closed-form agreement",
            budget: Duration::from_secs(10),
            run: ode_closed_form,
        },
        Criterion {
            id: 5,
            name: "gradient correctness",
            budget: Duration::from_secs(60),
            run: gradient_correctness,
        },
        Criterion {
            id: 6,
            name: "zero-head golden values",
            budget: Duration::from_secs(30),
            run: zero_head_golden,
        },
        Criterion {
            id: 7,
            name: "sampler oracle",
            budget: Duration::from_secs(60),
            run: sampler_oracle,
        },
        Criterion {
            id: 8,
            name: "fine-tune identity",
            budget: Duration::from_secs(10),
            run: finetune_identity,
        },
        Criterion {
            id: 9,
            name: "desk-scale speed-up trend",
            budget: Duration::from_secs(30 * 60),
            run: speedup_trend,
        },
        Criterion {
            id: 10,
            name: "KL partial ordering",
            budget: Duration::from_secs(45 * 60),
            run: partial_ordering,
        },
        Criterion {
            id: 11,
            name: "pipeline smoke",
            budget: Duration::from_secs(60),
            run: pipeline_smoke,
        },
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
    {
        let started = Instant::now();
        let outcome = (c.run)();
        let elapsed = started.elapsed();
        let in_budget = elapsed <= c.budget;
        let (pass, detail) = match outcome {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {}: {detail} [{:.1}s, budget {}s{}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" },
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
