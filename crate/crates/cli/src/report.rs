use std::io::Write;
use std::path::Path;

use collapse_sim_core::dynamics::DelayReport;
use collapse_sim_core::scenarios::{DecompositionReport, FrameRun, OrderSwapReport, Separation, SweepLevel};
use collapse_sim_core::{ConsistencyReport, ScenarioConfig};
use serde_json::{json, Value};

pub const VERSION: &str = concat!("collapse-sim v", env!("CARGO_PKG_VERSION"));

pub fn consistency(r: &ConsistencyReport) -> Value {
    json!({
        "max_abs": r.max_abs,
        "rel_frobenius": r.rel_frobenius,
        "tolerance": r.tolerance,
        "pass": r.pass,
        "reduced_detector": r.events.iter().map(|e| json!({
            "measurement": e.measurement,
            "detector": e.detector,
            "rel_difference": e.rel_difference,
        })).collect::<Vec<_>>(),
    })
}

pub fn events(cfg: &ScenarioConfig, run: &FrameRun<f64>) -> Value {
    run.events
        .iter()
        .map(|e| {
            json!({
                "measurement": e.event.index,
                "detector": cfg.detectors[e.event.detector].name,
                "slice_time": e.event.slice_time,
                "proper_time": e.event.proper_time,
                "ell": e.ledger.ell,
                "ell_bar": e.ledger.ell_bar,
                "j": e.ledger.j,
                "pre": [[e.ledger.pre[(0, 0)], e.ledger.pre[(0, 1)]], [e.ledger.pre[(1, 0)], e.ledger.pre[(1, 1)]]],
                "max_correction": e.ledger.correction,
            })
        })
        .collect()
}

pub fn delay(d: &DelayReport) -> Value {
    json!({ "delay": d.delay, "max_before": d.max_before, "max_after": d.max_after })
}

pub fn order_swap(r: &OrderSwapReport) -> Value {
    json!({
        "separation": match r.separation { Separation::Spacelike => "spacelike", Separation::Timelike => "timelike" },
        "order_t": r.order_t,
        "order_eta": r.order_eta,
        "in_frame_swap": r.in_frame_swap,
        "influence": delay(&r.influence),
    })
}

pub fn decomposition(d: &DecompositionReport) -> Value {
    json!({
        "nested_defect": d.nested_defect,
        "closed_form_defect": d.closed_form_defect,
        "mutual_influence": d.mutual_influence,
        "scale": d.scale,
    })
}

pub fn sweep_level(l: &SweepLevel) -> Value {
    json!({
        "dx": l.dx,
        "n_sites": l.n_sites,
        "max_abs": l.report.max_abs,
        "rel_frobenius": l.report.rel_frobenius,
        "pass": l.report.pass,
    })
}

pub fn scenario(cfg: &ScenarioConfig) -> Value {
    json!({
        "name": cfg.name,
        "amplitude": cfg.amplitude,
        "half_width": cfg.half_width,
        "dx": cfg.dx,
        "kernel": cfg.kernel.name(),
        "compare_time": cfg.compare_time(),
        "window_width": cfg.windows.width,
        "window_centers": cfg.windows.centers,
        "detectors": cfg.detectors.iter().map(|d| json!({
            "name": d.name, "omega": d.omega, "lambda": d.lambda, "position": d.position,
        })).collect::<Vec<_>>(),
        "measurements": cfg.measurements.iter().map(|m| json!({
            "detector": m.detector, "gain": m.gain, "frame": m.frame.name(), "time": m.time,
        })).collect::<Vec<_>>(),
        "integrator": {
            "scheme": cfg.integrator.scheme.name(),
            "dt_factor": cfg.integrator.dt_factor,
            "causality_courant": cfg.causality_courant,
        },
    })
}

pub fn tolerances(cfg: &ScenarioConfig) -> Value {
    json!({
        "consistency": cfg.tolerance,
        "symplectic_defect": cfg.integrator.symplectic_tol,
    })
}

pub fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    std::fs::write(path, s)
}

/// Correlator matrix as CSV with the observable labels on both axes.
pub fn write_correlators(path: &Path, run: &FrameRun<f64>) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "observable,{}", run.labels.join(","))?;
    for (r, label) in run.labels.iter().enumerate() {
        write!(w, "{label}")?;
        for c in 0..run.labels.len() {
            write!(w, ",{:e}", run.correlators[(r, c)])?;
        }
        writeln!(w)?;
    }
    w.flush()
}
