use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonar-tkbd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error kind="), "{stderr}");
    assert!(line.contains(" msg=\""), "{line}");
    line
}

/// Effective config without the output path, which names the run's directory.
fn config_body(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("output ="))
        .collect::<Vec<_>>()
        .join("\n")
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

const SHORT: &[&str] = &["--sim-profile", "--seed", "5", "simulate", "--duration", "10"];

fn simulate(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = SHORT.to_vec();
    args.extend(["--out", out]);
    args.extend(extra);
    ok(dir, &args);
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "a", &[]);
    simulate(tmp.path(), "b", &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for f in ["samples.f32", "truth.csv", "metadata.toml", "noise_model.varm"] {
        assert!(same_bytes(&a.join(f), &b.join(f)), "{f} differs");
    }
    assert_eq!(config_body(&a.join("config.toml")), config_body(&b.join("config.toml")));
    ok(tmp.path(), &["--sim-profile", "--seed", "6", "simulate", "--duration", "10", "--out", "c"]);
    assert!(!same_bytes(&a.join("samples.f32"), &tmp.path().join("c/samples.f32")));
}

#[test]
fn target_free_truth_has_no_target() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "free", &["--target-free", "--runs", "2"]);
    for run in ["run_000", "run_001"] {
        let truth = fs::read_to_string(tmp.path().join("free").join(run).join("truth.csv")).unwrap();
        let rows: Vec<&str> = truth.lines().skip(1).collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("-inf")), "{truth}");
    }
}

#[test]
fn effective_config_reproduces_the_track() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    ok(d, &["--sim-profile", "track", "--data", "ds", "--model", "ds/noise_model.varm", "--variant", "tvar", "--out", "t1"]);
    ok(d, &["--config", "t1/config.toml", "track", "--data", "ds", "--model", "ds/noise_model.varm", "--out", "t2"]);
    assert!(same_bytes(&d.join("t1/track.csv"), &d.join("t2/track.csv")));
    assert_eq!(config_body(&d.join("t1/config.toml")), config_body(&d.join("t2/config.toml")));
    let header = fs::read_to_string(d.join("t1/track.csv")).unwrap();
    assert!(header.starts_with("batch_index,time_s,q,psi_est_deg,psidot_est,eta_dB_est,confirmed"));
}

#[test]
fn cfar_track_writes_detections_and_eval_aggregates() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &["--runs", "2"]);
    ok(d, &["--sim-profile", "track", "--data", "ds/run_000", "ds/run_001", "--variant", "cfar", "--out", "t"]);
    for run in ["run_000", "run_001"] {
        let det = fs::read_to_string(d.join("t").join(run).join("detections.csv")).unwrap();
        assert!(det.starts_with("batch_index,bearing_deg"));
    }
    let stdout = ok(
        d,
        &[
            "--sim-profile", "eval", "--track", "t/run_000/track.csv", "t/run_001/track.csv",
            "--truth", "ds/run_000/truth.csv", "--out", "ev",
        ],
    );
    assert!(stdout.contains("runs=2"), "{stdout}");
    let bands = fs::read_to_string(d.join("ev/bands.csv")).unwrap();
    assert!(bands.starts_with("batch_index,q_p10,q_p50,q_p90,ospa_p10,ospa_p50,ospa_p90"));
    assert!(d.join("ev/metrics_run_001.csv").exists());
    assert_eq!(fs::read_to_string(d.join("ev/summary.csv")).unwrap().lines().count(), 3);
}

#[test]
fn never_confirmed_log_scores_the_cutoff() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    let truth = fs::read_to_string(d.join("ds/truth.csv")).unwrap();
    let n = truth.lines().count() - 1;
    let mut log = String::from("batch_index,time_s,q,psi_est_deg,psidot_est,eta_dB_est,confirmed\n");
    for k in 0..n {
        log.push_str(&format!("{k},{},0.0,NaN,NaN,NaN,0\n", k as f64 * 0.17));
    }
    fs::write(d.join("never.csv"), log).unwrap();
    ok(d, &["eval", "--track", "never.csv", "--truth", "ds/truth.csv", "--out", "ev"]);
    let metrics = fs::read_to_string(d.join("ev/metrics_run_000.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(1) == Some("30")), "{metrics}");
}

#[test]
fn fit_noise_order_zero_and_auto_order() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "free", &["--target-free"]);
    let out = ok(d, &["fit-noise", "--data", "free", "--order", "0", "--out", "m0.varm"]);
    assert!(out.contains("order=0"), "{out}");
    let bytes = fs::read(d.join("m0.varm")).unwrap();
    // Header plus Sigma_w only.
    assert_eq!(bytes.len(), 13 + 8 * 8 * 8);
    let out = ok(d, &["fit-noise", "--data", "free", "--auto-order", "3", "--out", "m.varm"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("aic p=")).count(), 4);
}

#[test]
fn calibrate_prior_writes_a_finite_cfar_setting() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "free", &["--target-free"]);
    fs::write(
        d.join("sweep.toml"),
        "[calibration.sweep]\nstart_db = 0.0\nstop_db = 4.0\ncoarse_step_db = 2.0\nmargin_db = 1.0\n",
    )
    .unwrap();
    let out = ok(
        d,
        &["--sim-profile", "--config", "sweep.toml", "calibrate-prior", "--data", "free", "--variant", "cfar", "--out", "cal/config.toml"],
    );
    assert!(out.contains("variant=cfar"), "{out}");
    let cfg = fs::read_to_string(d.join("cal/config.toml")).unwrap();
    assert!(cfg.contains("intensity"), "{cfg}");
}

#[test]
fn btr_has_one_column_per_bearing() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    ok(d, &["--sim-profile", "btr", "--data", "ds", "--normalize", "--out", "btr.csv"]);
    let text = fs::read_to_string(d.join("btr.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 1 + 181);
    let max = lines
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    assert_eq!(max, 1.0);
}

#[test]
fn failures_print_a_machine_readable_line() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let line = error_line(&cli(d, &["track", "--data", "missing", "--variant", "cfar", "--out", "x"]));
    assert!(line.starts_with("error kind=io"), "{line}");

    simulate(d, "ds", &[]);
    let line = error_line(&cli(d, &["--sim-profile", "track", "--data", "ds", "--variant", "tvar", "--out", "x"]));
    assert!(line.starts_with("error kind=config"), "{line}");

    fs::write(d.join("bad.toml"), "[filter]\nno_such_key = 1\n").unwrap();
    let line = error_line(&cli(d, &["--config", "bad.toml", "btr", "--data", "ds", "--out", "b.csv"]));
    assert!(line.starts_with("error kind=config"), "{line}");

    // A config describing another array than the one the data came from.
    fs::write(d.join("six.toml"), "profile = \"sim\"\n[array]\nelements = 6\n").unwrap();
    let line = error_line(&cli(d, &["--config", "six.toml", "btr", "--data", "ds", "--out", "b.csv"]));
    assert!(line.starts_with("error kind=config"), "{line}");
}
