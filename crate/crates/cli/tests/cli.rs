use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use collapse_sim_core::Chart64;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_collapse-sim"))
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A bundled config with its spacing replaced.
fn coarse(dir: &Path, name: &str, dx: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(configs().join(name)).unwrap();
    let p = dir.join(name);
    std::fs::write(
        &p,
        edit(text.replace("dx_in_pi = \"1/256\"", &format!("dx_in_pi = \"{dx}\""))),
    )
    .unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn bundled_single_measurement_passes() {
    let out = scratch("run-iv");
    let o = bin()
        .arg("run")
        .arg(configs().join("scenario_iv.cfg"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(rep["frame_consistency"]["max_abs"].as_f64().is_some());
    assert!(rep["frame_consistency"]["rel_frobenius"].as_f64().unwrap() <= 1e-2);
    assert_eq!(rep["config_hash"].as_str().unwrap().len(), 64);
    for f in ["correlators_t.csv", "correlators_eta.csv"] {
        let csv = std::fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.starts_with("observable,phi[0]"));
    }
}

#[test]
fn malformed_key_is_a_config_error() {
    let dir = scratch("bad-key");
    let p = coarse(&dir, "scenario_iv.cfg", "1/32", |t| {
        t.replace("lambda = 0.4", "lamda = 0.4")
    });
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out")
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lamda") && err.contains("line"), "{err}");
}

#[test]
fn zero_tolerance_fails() {
    let dir = scratch("zero-tol");
    let p = coarse(&dir, "scenario_iv.cfg", "1/32", |t| {
        t.replace("tolerance = 1e-2", "tolerance = 0")
    });
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out")
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(dir.join("o/report.json").exists());
}

#[test]
fn pair_run_reports_order_swap() {
    let dir = scratch("pair");
    let p = coarse(&dir, "spacelike_pair.cfg", "1/32", |t| {
        t.replace("tolerance = 1e-2", "tolerance = 1")
    });
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out")
        .arg(dir.join("o"))
        .arg("--decompose")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("o/report.json")).unwrap()).unwrap();
    assert_eq!(rep["order_swap"]["separation"], "spacelike");
    assert_eq!(rep["order_swap"]["order_t"], serde_json::json!(["A", "B"]));
    assert_eq!(rep["order_swap"]["order_eta"], serde_json::json!(["B", "A"]));
    assert!(rep["decomposition"]["eta"]["closed_form_defect"].as_f64().unwrap() < 1e-10);
}

#[test]
fn near_lightlike_pair_is_rejected() {
    let dir = scratch("lightlike");
    let p = coarse(&dir, "spacelike_pair.cfg", "1/32", |t| {
        t.replace("time_in_pi = \"1/2\"", "time_in_pi = \"4/3\"")
            .replace("compare_slice = 1", "compare_slice = 2")
    });
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out")
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_is_deterministic() {
    let (a, b) = (scratch("verify-a"), scratch("verify-b"));
    for d in [&a, &b] {
        let o = bin()
            .args(["verify", "--seed", "7", "--trials", "300", "--out"])
            .arg(d)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    }
    let ra = std::fs::read(a.join("verify.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("verify.json")).unwrap());
    let rep: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    let oracle = rep["suites"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["name"] == "collapse-oracle")
        .unwrap();
    assert_eq!(oracle["metrics"]["resolved_meter"], "diag(1/(2g), g/2)");
}

#[test]
fn injected_fault_is_caught() {
    let o = bin()
        .args(["verify", "--trials", "50", "--inject-fault", "sigma-scaling"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    let line = out.lines().find(|l| l.starts_with("collapse-uncertainty")).unwrap();
    assert!(line.ends_with("FAIL"), "{out}");
    assert!(out.lines().filter(|l| l.ends_with("FAIL")).count() == 1, "{out}");
}

#[test]
fn sweep_writes_jsonl() {
    let dir = scratch("sweep");
    let p = coarse(&dir, "scenario_iv.cfg", "1/16", |t| {
        t.replace("tolerance = 1e-2", "tolerance = 1")
    });
    let o = bin()
        .arg("sweep")
        .arg(&p)
        .args(["--levels", "2", "--out"])
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.join("o/sweep.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1]["rel_frobenius"].as_f64() < lines[0]["rel_frobenius"].as_f64());
    assert_eq!(lines[2]["strictly_decreasing"], true);
    let o = bin()
        .arg("sweep")
        .arg(&p)
        .args(["--levels", "1", "--out"])
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

fn read_grid(path: &Path) -> Vec<(String, [f64; 4])> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5, "{l}");
            let v = |i: usize| f[i].parse::<f64>().unwrap();
            (f[0].to_string(), [v(1), v(2), v(3), v(4)])
        })
        .collect()
}

#[test]
fn grid_curves_satisfy_the_chart() {
    let dir = scratch("grid");
    let p = dir.join("grid.csv");
    let o = bin()
        .args(["emit-grid", "--A", "0.5", "--lines", "6", "--samples", "50", "--out"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let chart = Chart64::new(0.5).unwrap();
    let rows = read_grid(&p);
    assert_eq!(rows.len(), 7 * 51 + 19 * 51);
    assert_eq!(rows.iter().filter(|(f, _)| f == "eta").count(), 7 * 51);
    for (family, [t, x, eta, xi]) in &rows {
        let (e, s) = chart.to_alt(*t, *x);
        assert!(
            (e - eta).abs().max((s - xi).abs()) < 1e-12,
            "{family} ({eta}, {xi}) at ({t}, {x})"
        );
        assert!((-1e-12..=PI + 1e-12).contains(t));
    }
}

#[test]
fn flat_grid_is_straight() {
    let dir = scratch("flat");
    let p = dir.join("g.csv");
    let o = bin()
        .args(["emit-grid", "--A", "0", "--lines", "3", "--samples", "10", "--out"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for (_, [t, x, eta, xi]) in read_grid(&p) {
        assert!((t - eta).abs().max((x - xi).abs()) < 1e-14);
    }
    let o = bin()
        .args(["emit-grid", "--A", "-0.1", "--out"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
