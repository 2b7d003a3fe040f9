use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dssfa::datagen::{read_matrix_csv, Dataset};
use dssfa::gibbs::read_draws;
use dssfa::pfa::FitPath;
use dssfa::posterior_mean_cov;
use dssfa::summary::{read_selection_json, read_summary_csv};

const SMALL: &str = r#"
[generation]
p = 6
k0 = 2
n = 80
replicates = 2
base_seed = 11

[sampler.chain]
k = 3
iterations = 400
burnin = 200

[path]
k_range = [1, 2, 3]
path_length = 4

[bench]
iterations = 300
burnin = 150
"#;

fn dssfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dssfa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dssfa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// simulate → sample → fit in `dir`, returning the config path.
fn pipeline(dir: &Path, extra: &str) -> PathBuf {
    let config = write_config(dir, &format!("{SMALL}{extra}"));
    ok(&["simulate", "--config", s(&config), "--out", s(&dir.join("sim"))]);
    let data = dir.join("sim/rep000/data.csv");
    ok(&["sample", "--data", s(&data), "--config", s(&config), "--out", s(&dir.join("sample"))]);
    let draws = dir.join("sample/draws.bin");
    ok(&["fit", "--draws", s(&draws), "--config", s(&config), "--out", s(&dir.join("fit"))]);
    config
}

#[test]
fn version_prints() {
    let out = ok(&["version"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("dssfa "));
}

#[test]
fn simulate_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    for name in ["a", "b"] {
        ok(&["simulate", "--config", s(&config), "--out", s(&dir.path().join(name))]);
    }
    for r in ["rep000", "rep001"] {
        for f in ["data.csv", "B0.csv", "Sigma0.csv", "Omega0.csv"] {
            let a = std::fs::read(dir.path().join("a").join(r).join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(r).join(f)).unwrap();
            assert_eq!(a, b, "{r}/{f}");
        }
    }
    let rep = dir.path().join("a/rep000");
    let b0 = read_matrix_csv(&rep.join("B0.csv")).unwrap();
    let s0 = read_matrix_csv(&rep.join("Sigma0.csv")).unwrap();
    let o0 = read_matrix_csv(&rep.join("Omega0.csv")).unwrap();
    assert!((&b0 * b0.transpose() + s0 - o0).amax() < 1e-12);
    let data = Dataset::read_csv(&rep.join("data.csv")).unwrap();
    assert_eq!((data.n(), data.p()), (80, 6));
    let text = std::fs::read_to_string(rep.join("data.csv")).unwrap();
    let cells: usize = text.lines().skip(1).map(|l| l.split(',').count()).sum();
    assert_eq!(cells, 80 * 6);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 6);
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
    assert!(manifest.contains("config_digest"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = pipeline(dir.path(), "");
    let draws_path = dir.path().join("sample/draws.bin");
    let draws = read_draws(&draws_path).unwrap();
    assert_eq!(draws.len(), 200);
    assert_eq!(draws.k(), 3);

    let fitpath = dir.path().join("fit/fitpath.json");
    let path = FitPath::read_json(&fitpath).unwrap();
    assert_eq!(path.omega_bar_digest, posterior_mean_cov(&draws).digest());
    for k in 1..=3 {
        assert!(path.get(k, 0).is_some_and(|f| f.lambda == 0.0));
    }

    // Rerunning the fit gives the same file.
    ok(&["fit", "--draws", s(&draws_path), "--config", s(&config), "--out", s(&dir.path().join("fit2"))]);
    assert_eq!(
        std::fs::read(&fitpath).unwrap(),
        std::fs::read(dir.path().join("fit2/fitpath.json")).unwrap()
    );

    let mut selected = Vec::new();
    for q in ["0.95", "0.99"] {
        let out = dir.path().join(format!("sum{q}"));
        ok(&[
            "summarize", "--draws", s(&draws_path), "--fitpath", s(&fitpath), "--quantile", q, "--out", s(&out),
        ]);
        let rows = read_summary_csv(&out.join("summary.csv")).unwrap();
        assert_eq!(rows.len(), path.fits.len());
        assert_eq!(rows.iter().filter(|r| r.selected).count(), 1);
        assert!(out.join("fullmodel_losses.csv").exists());
        selected.push(read_selection_json(&out.join("selection.json")).unwrap());
    }
    let (lo, hi) = (&selected[0], &selected[1]);
    assert!(lo.feasible_set.iter().all(|g| hi.is_feasible(g.k_tilde, g.lambda_index)));
    assert!(hi.k_selected <= lo.k_selected);
}

#[test]
fn plt_draws_keep_structural_zeros() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "\n[sampler.prior]\nfamily = \"plt\"\n");
    let draws = read_draws(&dir.path().join("sample/draws.bin")).unwrap();
    assert!(draws.provenance().starts_with("file:"));
    for b in draws.loadings() {
        let m = b.as_matrix();
        for q in 0..m.ncols() {
            assert!(m[(q, q)] > 0.0);
            for j in 0..q {
                assert_eq!(m[(j, q)], 0.0);
            }
        }
    }
}

#[test]
fn bench_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("bench");
    ok(&["--threads", "2", "bench", "--config", s(&config), "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("bench_report.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("scenario,quantile,replicates,failed,correct,proportion"));
    assert_eq!(lines.count(), 2);
    let reps = std::fs::read_to_string(out.join("bench_replicates.csv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 2 * 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[generation]\nreplicates = 0\n");
    let out = dssfa(&["simulate", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generation.replicates"));

    assert_eq!(dssfa(&["simulate", "--quantile", "1.5"]).status.code(), Some(2));
    assert_eq!(dssfa(&["frobnicate"]).status.code(), Some(2));

    let missing = dir.path().join("nope.bin");
    let out = dssfa(&["fit", "--draws", s(&missing)]);
    assert_eq!(out.status.code(), Some(4));

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a draws file").unwrap();
    assert_eq!(dssfa(&["fit", "--draws", s(&garbage)]).status.code(), Some(4));
}

#[test]
fn missing_full_model_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = pipeline(dir.path(), "");
    let draws = dir.path().join("sample/draws.bin");
    let short = dir.path().join("short");
    ok(&["fit", "--draws", s(&draws), "--config", s(&config), "--k", "2", "--out", s(&short)]);
    let out = dssfa(&[
        "summarize",
        "--draws",
        s(&draws),
        "--fitpath",
        s(&short.join("fitpath.json")),
        "--out",
        s(&dir.path().join("sum")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
