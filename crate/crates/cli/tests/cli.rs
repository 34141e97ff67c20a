use std::path::Path;
use std::process::{Command, Output};

fn metflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metflow"))
        .args(args)
        .current_dir(cwd)
        .env("METFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn preset_toml(name: &str, dir: &Path) -> String {
    let out = metflow(&["preset-list", "--show", name], dir);
    assert_eq!(code(&out), 0);
    String::from_utf8(out.stdout).unwrap()
}

fn train_short(dir: &Path, preset: &str, out: &str, iterations: &str) {
    let o = metflow(&["train", "--preset", preset, "--iterations", iterations, "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn preset_list_names_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = metflow(&["preset-list"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["mog2d", "funnel", "hypercube", "gauss1d"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from {text}");
    }
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let toml: String = preset_toml("gauss1d", dir.path())
        .lines()
        .filter(|l| !l.starts_with("seed ="))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.path().join("c.toml"), toml).unwrap();
    let out = metflow(&["train", "--config", "c.toml", "--out", "run"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn unknown_target_and_schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = preset_toml("mog2d", dir.path());
    let unknown = base.replace("name = \"ring\"", "name = \"banana\"");
    std::fs::write(dir.path().join("a.toml"), unknown).unwrap();
    assert_eq!(code(&metflow(&["train", "--config", "a.toml"], dir.path())), 2);
    let extra = base.replace("steps = 5", "steps = 5\nwarp = 3");
    std::fs::write(dir.path().join("b.toml"), extra).unwrap();
    assert_eq!(code(&metflow(&["train", "--config", "b.toml"], dir.path())), 2);
    let zero = base.replace("steps = 5", "steps = 0");
    std::fs::write(dir.path().join("c.toml"), zero).unwrap();
    assert_eq!(code(&metflow(&["train", "--config", "c.toml"], dir.path())), 2);
}

#[test]
fn unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&metflow(&["check", "everything"], dir.path())), 2);
}

#[test]
fn flows_suite_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = metflow(&["check", "flows", "--out", "report.json"], dir.path());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["suites"][0]["name"], "flows");
}

#[test]
fn balance_suite_fails_with_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = metflow(&["check", "balance", "--inject-negative-control"], dir.path());
    assert_eq!(code(&out), 1);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], false);
    assert_eq!(report["negative_control"], true);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    train_short(dir.path(), "gauss1d", "a", "60");
    train_short(dir.path(), "gauss1d", "b", "60");
    for f in ["params.bin", "manifest.json", "train_log.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    for out in ["s1.csv", "s2.csv"] {
        let o = metflow(&["sample", "a", "--n", "300", "--seed", "5", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let s1 = std::fs::read(dir.path().join("s1.csv")).unwrap();
    assert_eq!(s1, std::fs::read(dir.path().join("s2.csv")).unwrap());
    assert_eq!(String::from_utf8(s1).unwrap().lines().count(), 301);
    let o = metflow(&["sample", "a", "--n", "300", "--seed", "6", "--out", "s3.csv"], dir.path());
    assert_eq!(code(&o), 0);
    assert_ne!(
        std::fs::read(dir.path().join("s1.csv")).unwrap(),
        std::fs::read(dir.path().join("s3.csv")).unwrap()
    );
}

#[test]
fn mog2d_sample_writes_occupancy_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    train_short(dir.path(), "mog2d", "run", "20");
    let run = dir.path().join("run");
    for f in ["params.bin", "manifest.json", "train_log.csv", "metrics.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,elbo,ema,accept_1,accept_2,accept_3,accept_4,accept_5\n"));
    let o = metflow(&["sample", "run", "--n", "200", "--extra-kernels", "20"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("samples.json")).unwrap()).unwrap();
    assert_eq!(meta["kernels"], 100);
    assert_eq!(meta["occupancy"]["hits"].as_array().unwrap().len(), 8);
    let radius = meta["occupancy"]["radius"].as_f64().unwrap();
    assert!((radius - 4.0 * 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn funnel_preset_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    train_short(dir.path(), "funnel", "run", "20");
    let o = metflow(&["sample", "run", "--n", "50"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/samples.json")).unwrap()).unwrap();
    assert_eq!(meta["kernels"], 500);
    assert!(meta["occupancy"].is_null());
}

#[test]
fn mismatched_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train_short(dir.path(), "gauss1d", "run", "10");
    let other = preset_toml("gauss1d", dir.path()).replace("blocks = 1", "blocks = 2");
    std::fs::write(dir.path().join("other.toml"), other).unwrap();
    let o = metflow(&["sample", "run", "--config", "other.toml", "--n", "10"], dir.path());
    assert_eq!(code(&o), 2);
    let same = preset_toml("gauss1d", dir.path());
    std::fs::write(dir.path().join("same.toml"), same).unwrap();
    let o = metflow(&["sample", "run", "--config", "same.toml", "--n", "10"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn preset_config_round_trips_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), preset_toml("funnel", dir.path())).unwrap();
    let o = metflow(&["train", "--config", "c.toml", "--iterations", "5", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["target"]["name"], "funnel");
    assert_eq!(manifest["config"]["train"]["iterations"], 5);
    assert_eq!(manifest["config"]["sample"]["extra_kernels"], 100);
}

#[test]
fn eval_density_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    train_short(dir.path(), "gauss1d", "run", "10");
    let o = metflow(&["eval-density", "run", "--lo", "-4", "--hi", "8", "--n", "121"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("run/density.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(|x| x.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 121);
    // trapezoid mass of the exact density over most of its support
    let h = 0.1;
    let mass: f64 = rows.windows(2).map(|w| 0.5 * h * (w[0].1.exp() + w[1].1.exp())).sum();
    assert!(mass > 0.99 && mass < 1.0 + 1e-6, "{mass}");
}
