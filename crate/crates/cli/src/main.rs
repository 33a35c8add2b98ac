use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collapse_sim_core::scenarios::{
    classify, order_swap_experiment, paper_decomposition_check, refinement_sweep, run_both, schedule,
};
use collapse_sim_core::{Chart64, Frame, ScenarioConfig};
use serde_json::{json, Value};

mod config;
mod grid;
mod report;
mod verify;

#[derive(Parser)]
#[command(
    name = "collapse-sim",
    version,
    about = "Frame-consistency experiments for Gaussian detector collapse"
)]
struct Cli {
    /// Progress on stderr; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario in both frames and compare them.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also reassemble the final field block from propagators.
        #[arg(long)]
        decompose: bool,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value_t = 20_241_017)]
        seed: u64,
        /// Lattice spacing in units of pi, e.g. "1/64".
        #[arg(long, default_value = "1/64")]
        dx_in_pi: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, value_enum)]
        inject_fault: Option<verify::Fault>,
        /// Directory for `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat a scenario at successively halved spacing.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the (eta, xi) coordinate lines as CSV.
    EmitGrid {
        #[arg(long = "A", allow_hyphen_values = true)]
        a: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        lines: usize,
        #[arg(long, default_value_t = 240)]
        samples: usize,
    },
}

enum Failure {
    Tolerance(String),
    Config(String),
}

impl Failure {
    fn exit(self) -> ExitCode {
        match self {
            Failure::Tolerance(m) => {
                eprintln!("fail: {m}");
                ExitCode::from(1)
            }
            Failure::Config(m) => {
                eprintln!("config error: {m}");
                ExitCode::from(2)
            }
        }
    }
}

fn io_fail(e: std::io::Error) -> Failure {
    Failure::Tolerance(format!("i/o: {e}"))
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("COLLAPSE_SIM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Config(format!("COLLAPSE_SIM_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

/// Loads the config and checks everything that can be checked before any
/// evolution runs.
fn load(path: &Path) -> Result<config::LoadedConfig, Failure> {
    let loaded = config::load(path).map_err(Failure::Config)?;
    for frame in [Frame::T, Frame::Eta] {
        schedule::<f64>(&loaded.scenario, frame).map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(loaded)
}

fn is_pair(cfg: &ScenarioConfig) -> bool {
    cfg.measurements.len() == 2 && cfg.measurements[0].detector != cfg.measurements[1].detector
}

fn cmd_run(path: &Path, out: &Path, seed: u64, decompose: bool, verbose: u8) -> Result<(), Failure> {
    let loaded = load(path)?;
    let cfg = &loaded.scenario;
    if is_pair(cfg) {
        classify(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(out).map_err(io_fail)?;
    let fail = |e: collapse_sim_core::Error| Failure::Tolerance(e.to_string());
    if verbose > 0 {
        eprintln!("running {} in both frames", cfg.name);
    }
    let (pair, swap) = if is_pair(cfg) {
        let (r, p) = order_swap_experiment::<f64>(cfg).map_err(fail)?;
        (p, Some(r))
    } else {
        (run_both::<f64>(cfg, decompose).map_err(fail)?, None)
    };
    let mut rep = json!({
        "version": report::VERSION,
        "config_hash": loaded.hash,
        "seed": seed,
        "tolerances": report::tolerances(cfg),
        "scenario": report::scenario(cfg),
        "frame_consistency": report::consistency(&pair.report),
        "events": { "t": report::events(cfg, &pair.t), "eta": report::events(cfg, &pair.eta) },
        "max_symplectic_defect": pair.t.max_defect.max(pair.eta.max_defect),
    });
    if let Some(s) = &swap {
        rep["order_swap"] = report::order_swap(s);
    }
    if decompose {
        let mut d = serde_json::Map::new();
        for run in [&pair.t, &pair.eta] {
            d.insert(
                run.frame.name().into(),
                report::decomposition(&paper_decomposition_check(run).map_err(fail)?),
            );
        }
        rep["decomposition"] = Value::Object(d);
    }
    report::write_json(&out.join("report.json"), &rep).map_err(io_fail)?;
    report::write_correlators(&out.join("correlators_t.csv"), &pair.t).map_err(io_fail)?;
    report::write_correlators(&out.join("correlators_eta.csv"), &pair.eta).map_err(io_fail)?;
    let r = &pair.report;
    println!(
        "{}: rel_frobenius = {:.3e}, max_abs = {:.3e}, tolerance = {:e} -> {}",
        cfg.name,
        r.rel_frobenius,
        r.max_abs,
        r.tolerance,
        if r.pass { "pass" } else { "FAIL" }
    );
    if r.pass {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "frame difference {:.3e} exceeds tolerance {:e}",
            r.rel_frobenius, r.tolerance
        )))
    }
}

fn cmd_verify(opts: verify::VerifyOptions, out: Option<&Path>, verbose: u8) -> Result<(), Failure> {
    let suites = verify::run_all(&opts, |s| {
        println!("{:<24} {}", s.name, if s.pass { "pass" } else { "FAIL" });
        if verbose > 0 {
            eprintln!("  {}", s.metrics);
        }
    });
    let all = suites.iter().all(|s| s.pass);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_fail)?;
        let settings = format!(
            "seed={} dx={} trials={} fault={:?}",
            opts.seed, opts.dx, opts.trials, opts.fault
        );
        let rep = json!({
            "version": report::VERSION,
            "config_hash": config::hash_bytes(settings.as_bytes()),
            "seed": opts.seed,
            "dx": opts.dx,
            "tolerances": {
                "chart": 1e-12, "symplectic_defect": 1e-8, "huygens": 1e-8, "detector_oracle": 0.02,
                "collapse_cross": 1e-14, "uncertainty": 1e-9, "collapse_oracle": 1e-10,
                "causality_before": 1e-10, "causality_after": 1e-6, "decomposition": 1e-8, "factorization": 1e-10,
            },
            "pass": all,
            "suites": suites.iter().map(|s| json!({ "name": s.name, "pass": s.pass, "metrics": s.metrics })).collect::<Vec<_>>(),
        });
        report::write_json(&dir.join("verify.json"), &rep).map_err(io_fail)?;
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Tolerance("one or more suites failed".into()))
    }
}

fn cmd_sweep(path: &Path, levels: usize, out: &Path, verbose: u8) -> Result<(), Failure> {
    let loaded = load(path)?;
    let cfg = &loaded.scenario;
    if levels < 2 {
        return Err(Failure::Config("--levels must be at least 2".into()));
    }
    std::fs::create_dir_all(out).map_err(io_fail)?;
    let mut lines = Vec::new();
    let sweep = refinement_sweep::<f64>(cfg, levels, |l| {
        if verbose > 0 {
            eprintln!("dx = {:.5}: rel_frobenius = {:.3e}", l.dx, l.report.rel_frobenius);
        }
        lines.push(report::sweep_level(l));
    })
    .map_err(|e| Failure::Tolerance(e.to_string()))?;
    let finest = sweep.levels.last().expect("levels >= 2");
    let pass = finest.report.pass && sweep.strictly_decreasing;
    lines.push(json!({
        "version": report::VERSION,
        "config_hash": loaded.hash,
        "tolerance": cfg.tolerance,
        "orders": sweep.orders,
        "strictly_decreasing": sweep.strictly_decreasing,
        "pass": pass,
    }));
    let text: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(out.join("sweep.jsonl"), text).map_err(io_fail)?;
    for l in &sweep.levels {
        println!("dx = {:.6}  rel_frobenius = {:.3e}", l.dx, l.report.rel_frobenius);
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Tolerance("sweep did not converge below tolerance".into()))
    }
}

fn cmd_emit_grid(a: f64, out: &Path, lines: usize, samples: usize) -> Result<(), Failure> {
    let chart = Chart64::new(a).map_err(|e| Failure::Config(e.to_string()))?;
    if lines == 0 || samples == 0 {
        return Err(Failure::Config("--lines and --samples must be positive".into()));
    }
    let f = std::fs::File::create(out).map_err(io_fail)?;
    grid::write_grid(&chart, lines, samples, std::io::BufWriter::new(f)).map_err(Failure::Tolerance)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            decompose,
        } => cmd_run(config, out, *seed, *decompose, cli.verbose),
        Cmd::Verify {
            seed,
            dx_in_pi,
            trials,
            inject_fault,
            out,
        } => {
            let dx = config::parse_fraction(dx_in_pi)
                .filter(|d| *d > 0.0)
                .ok_or_else(|| Failure::Config(format!("bad --dx-in-pi {dx_in_pi:?}")));
            dx.and_then(|dx| {
                let opts = verify::VerifyOptions {
                    seed: *seed,
                    dx: dx * std::f64::consts::PI,
                    trials: *trials,
                    fault: *inject_fault,
                };
                cmd_verify(opts, out.as_deref(), cli.verbose)
            })
        }
        Cmd::Sweep { config, levels, out } => cmd_sweep(config, *levels, out, cli.verbose),
        Cmd::EmitGrid { a, out, lines, samples } => cmd_emit_grid(*a, out, *lines, *samples),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.exit(),
    }
}
