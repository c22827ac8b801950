use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kldiff::matrix::read_matrix;

fn kldiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kldiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "seed = 3\nmodel.hidden = 16,16\nmodel.embed_dim = 8\n\
train.batch_size = 16\ntrain.total_steps = 40\ntrain.eval_every = 20\n\
eval.samples = 64\neval.repeats = 2\neval.projections = 16\n";

#[test]
fn help_exits_zero() {
    let out = kldiff(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["basis", "simulate", "train", "sample", "eval", "sweep"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn error_categories_and_exit_codes() {
    let out = kldiff(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "train.los = baseline\n");
    assert_eq!(kldiff(&["train", "--config", &cfg]).status.code(), Some(2));

    let out = kldiff(&[
        "sample",
        "--ckpt",
        "/nonexistent/c.kld",
        "--out",
        "/tmp/never.bin",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let junk = dir.path().join("junk.kld");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = kldiff(&[
        "sample",
        "--ckpt",
        junk.to_str().unwrap(),
        "--out",
        "/tmp/never.bin",
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn simulate_and_basis_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.cfg",
        "seed = 1\ntrain.loss = kl_full\nbasis.m_terms = 4\n",
    );
    let out = dir.path().join("xt.bin");
    for path in ["marginal", "kl-approx", "kl-exact"] {
        let status = kldiff(&[
            "simulate",
            "--config",
            &cfg,
            "--n",
            "200",
            "--k",
            "20",
            "--path",
            path,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(status.status.code(), Some(0), "{path}");
        let (m, meta) = read_matrix(&out).unwrap();
        assert_eq!(m.dim(), (200, 2));
        assert!(meta.source.contains("k20"));
    }
    let table = dir.path().join("basis.csv");
    assert!(
        kldiff(&["basis", "--config", &cfg, "--out", table.to_str().unwrap()])
            .status
            .success()
    );
    let text = fs::read_to_string(&table).unwrap();
    // header comment + column names + (N+1)·M rows
    assert_eq!(text.lines().count(), 2 + 21 * 4);
    assert!(text.starts_with("# config_hash="));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}train.checkpoint_every = 20\n");
    let full_dir = dir.path().join("full");
    let cfg = write_config(
        dir.path(),
        "run.cfg",
        &format!("{body}out_dir = {}\n", full_dir.display()),
    );
    assert!(kldiff(&["train", "--config", &cfg]).status.success());
    let mid = full_dir.join("ckpt-00000020.kld");
    let resumed = dir.path().join("resumed");
    let out = kldiff(&[
        "train",
        "--config",
        &cfg,
        "--resume",
        mid.to_str().unwrap(),
        "--out-dir",
        resumed.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(full_dir.join("checkpoint.kld")).unwrap(),
        fs::read(resumed.join("checkpoint.kld")).unwrap()
    );

    let other = write_config(
        dir.path(),
        "other.cfg",
        &format!("{body}seed = 4\n").replace("seed = 3\n", ""),
    );
    let out = kldiff(&[
        "train",
        "--config",
        &other,
        "--resume",
        mid.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn eval_compare_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(
        &a,
        "# config_hash=aa\nstep,loss,sliced_wasserstein\n100,1,0.5\n200,1,0.2\n",
    )
    .unwrap();
    fs::write(
        &b,
        "# config_hash=bb\nstep,loss,sliced_wasserstein\n50,1,0.5\n100,1,0.2\n",
    )
    .unwrap();
    let report = dir.path().join("cmp.csv");
    let out = kldiff(&[
        "eval",
        "--compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--threshold",
        "0.3",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&report).unwrap();
    let row = text.lines().nth(2).unwrap();
    assert_eq!(row, "0.3,sliced_wasserstein,200,100,2,bb");
}

fn sweep_config(dir: &Path, name: &str, extra: &str) -> String {
    write_config(
        dir,
        name,
        &format!("{SMALL}train.loss = kl_full\nsweep.mode = fixed-n\nschedule.n_steps = 10\nsampler.steps = 10\n{extra}out_dir = {}\n", dir.join(name).with_extension("d").display()),
    )
}

#[test]
fn sweep_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for name in ["s1.cfg", "s2.cfg"] {
        let cfg = sweep_config(dir.path(), name, "sweep.m_values = 1,2\n");
        let out = kldiff(&["sweep", "--config", &cfg]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        summaries.push(
            fs::read_to_string(
                dir.path()
                    .join(name)
                    .with_extension("d")
                    .join("summary.csv"),
            )
            .unwrap(),
        );
    }
    assert_eq!(summaries[0], summaries[1]);
    assert_eq!(summaries[0].lines().count(), 4);
}

#[test]
fn one_cell_sweep_equals_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(
        dir.path(),
        "one.cfg",
        "sweep.m_values = 2\nbasis.m_terms = 2\n",
    );
    assert!(kldiff(&["sweep", "--config", &cfg]).status.success());
    let cell = dir.path().join("one.d").join("cell-m2-n10");
    let train_dir = dir.path().join("direct");
    assert!(kldiff(&[
        "train",
        "--config",
        &cfg,
        "--out-dir",
        train_dir.to_str().unwrap()
    ])
    .status
    .success());
    assert_eq!(
        fs::read(cell.join("checkpoint.kld")).unwrap(),
        fs::read(train_dir.join("checkpoint.kld")).unwrap()
    );
    let strip = |p: &Path| -> Vec<String> {
        // wall-clock time is the last column
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(
        strip(&cell.join("metrics.csv")),
        strip(&train_dir.join("metrics.csv"))
    );
}
