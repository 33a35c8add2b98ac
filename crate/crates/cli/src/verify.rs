//! Invariant suites behind `collapse-sim verify`.

use std::f64::consts::PI;

use collapse_sim_core::dynamics::{
    build_hamiltonian, detector_oracle_error, huygens_check, integrate_propagator, retarded_delay_check,
};
use collapse_sim_core::measurement::{
    collapse_paper, meter_covariance, outcome_density, random_state, resolve_meter_convention, MeterConvention,
};
use collapse_sim_core::scenarios::{paper_decomposition_check, run_one_frame};
use collapse_sim_core::{Chart64, Detector, Frame, IntegratorOptions, Lattice64, MeasurementSpec, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Halve every covariance before the uncertainty check.
    SigmaScaling,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub dx: f64,
    pub trials: usize,
    pub fault: Option<Fault>,
}

pub struct Suite {
    pub name: &'static str,
    pub pass: bool,
    pub metrics: Value,
}

fn suite(name: &'static str, f: impl FnOnce() -> Result<(bool, Value), String>) -> Suite {
    match f() {
        Ok((pass, metrics)) => Suite { name, pass, metrics },
        Err(e) => Suite {
            name,
            pass: false,
            metrics: json!({ "error": e }),
        },
    }
}

fn det(name: &str, x: f64) -> Detector<f64> {
    Detector {
        name: name.into(),
        omega: 1.0,
        lambda: 0.4,
        position: x,
    }
}

fn err(e: collapse_sim_core::Error) -> String {
    e.to_string()
}

fn chart() -> Result<(bool, Value), String> {
    let c = Chart64::new(0.5).map_err(err)?;
    let (eta, xi) = c.to_alt(PI / 2.0, 0.0);
    let anchor = (eta - (PI - 1.0) / 2.0).abs().max(xi.abs());
    let (mut round, mut jac) = (0.0f64, 0.0f64);
    for a in [0.1, 0.5, 0.9] {
        let c = Chart64::new(a).map_err(err)?;
        for i in 0..100 {
            for j in 0..100 {
                let t = PI * i as f64 / 99.0;
                let x = -2.0 * PI + 3.0 * PI * j as f64 / 99.0;
                let (e, s) = c.to_alt(t, x);
                let (t2, x2) = c.from_alt(e, s).map_err(err)?;
                round = round.max((t2 - t).abs().max((x2 - x).abs()));
                jac = jac.max((c.jacobian(t, x).determinant() - 1.0 / c.conformal_factor(t, x)).abs());
            }
        }
    }
    let pass = anchor <= 1e-12 && round <= 1e-12 && jac <= 1e-12;
    Ok((pass, json!({ "anchor": anchor, "round_trip": round, "jacobian": jac })))
}

fn propagators(dx: f64) -> Result<(bool, Value), String> {
    let lattice = Lattice64::build(3.0 * PI, dx).map_err(err)?;
    let chart = Chart64::new(0.5).map_err(err)?;
    let dets = [det("A", -PI), det("B", 0.0)];
    let opts = IntegratorOptions::default();
    let mut m = serde_json::Map::new();
    let mut pass = true;
    for frame in [Frame::T, Frame::Eta] {
        let h = build_hamiltonian(frame, &lattice, &dets, &chart).map_err(err)?;
        let p = integrate_propagator(&h, 0.0, PI, &opts).map_err(err)?;
        let defect = p.symplectic_defect();
        let mut huygens = 0.0f64;
        for t1 in [PI / 4.0, PI / 2.0, 3.0 * PI / 4.0] {
            huygens = huygens.max(huygens_check(&h, 0.0, t1, PI, &opts).map_err(err)?);
        }
        pass &= defect <= 1e-8 && huygens <= 1e-8;
        m.insert(
            frame.name().into(),
            json!({ "symplectic_defect": defect, "huygens": huygens }),
        );
    }
    Ok((pass, Value::Object(m)))
}

fn oracle(dx: f64) -> Result<(bool, Value), String> {
    let chart = Chart64::new(0.5).map_err(err)?;
    let mut errs = Vec::new();
    for h in [dx, dx / 2.0] {
        let lattice = Lattice64::build(3.0 * PI, h).map_err(err)?;
        let ham = build_hamiltonian(Frame::T, &lattice, &[det("A", 0.0)], &chart).map_err(err)?;
        errs.push(detector_oracle_error(&ham, 0, 2.0 * PI, &IntegratorOptions::default()).map_err(err)?);
    }
    Ok((errs[1] <= 0.02 && errs[1] < errs[0], json!({ "relative_error": errs })))
}

fn collapse_structure(opts: &VerifyOptions) -> Result<(bool, Value), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut block, mut cross, mut min_nu) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut violations = 0usize;
    for _ in 0..opts.trials {
        let state = random_state(2, 2, &mut rng);
        let g = rng.random_range(-1.5f64..1.5).exp();
        let spec = MeasurementSpec {
            detector: rng.random_range(0..2),
            g,
            frame: Frame::T,
            time: 0.0,
        };
        let (mut post, _) = collapse_paper(&state, &spec).map_err(err)?;
        let l = post.layout;
        let (a, b) = (l.q(spec.detector), l.p(spec.detector));
        block = block
            .max((post.sigma[(a, a)] - g / 2.0).abs())
            .max((post.sigma[(b, b)] - 1.0 / (2.0 * g)).abs())
            .max(post.sigma[(a, b)].abs());
        for r in (0..l.dim()).filter(|&r| r != a && r != b) {
            cross = cross.max(post.sigma[(r, a)].abs()).max(post.sigma[(r, b)].abs());
        }
        if opts.fault == Some(Fault::SigmaScaling) {
            post.sigma *= 0.5;
        }
        match post.validate() {
            Ok(v) => min_nu = min_nu.min(v.min_symplectic),
            Err(_) => violations += 1,
        }
    }
    let pass = block == 0.0 && cross <= 1e-14 && violations == 0;
    Ok((
        pass,
        json!({
            "trials": opts.trials,
            "post_block_error": block,
            "max_cross": cross,
            "min_symplectic_eigenvalue": if min_nu.is_finite() { json!(min_nu) } else { Value::Null },
            "uncertainty_violations": violations,
        }),
    ))
}

fn collapse_oracle(opts: &VerifyOptions) -> Result<(bool, Value), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let r = resolve_meter_convention(200, 4, &mut rng).map_err(err)?;
    let best = match r.convention {
        MeterConvention::Swapped => r.deviation_swapped,
        MeterConvention::Prepared => r.deviation_prepared,
    };
    Ok((
        best <= 1e-10,
        json!({
            "resolved_meter": r.convention.name(),
            "deviation_prepared": r.deviation_prepared,
            "deviation_swapped": r.deviation_swapped,
        }),
    ))
}

fn causality(dx: f64) -> Result<(bool, Value), String> {
    let lattice = Lattice64::build(3.0 * PI, dx).map_err(err)?;
    let chart = Chart64::new(0.5).map_err(err)?;
    let h = build_hamiltonian(Frame::T, &lattice, &[det("A", -PI), det("B", 0.0)], &chart).map_err(err)?;
    let opts = IntegratorOptions {
        dt_factor: 0.995,
        symplectic_tol: None,
        ..Default::default()
    };
    let d = retarded_delay_check(&h, 0, 1, PI + 1.0, &opts).map_err(err)?;
    Ok((d.max_before <= 1e-10 && d.max_after >= 1e-6, crate::report::delay(&d)))
}

fn decomposition(dx: f64) -> Result<(bool, Value), String> {
    let mut m = serde_json::Map::new();
    let mut pass = true;
    for cfg in [ScenarioConfig::single_measurement(), ScenarioConfig::spacelike_pair()] {
        let cfg = ScenarioConfig {
            windows: collapse_sim_core::scenarios::WindowFamily {
                width: PI / 32.0,
                ..cfg.windows.clone()
            },
            ..cfg.with_dx(dx)
        };
        for frame in [Frame::T, Frame::Eta] {
            let run = run_one_frame::<f64>(&cfg, frame, true).map_err(err)?;
            let d = paper_decomposition_check(&run).map_err(err)?;
            pass &= d.nested_defect <= 1e-8 && d.closed_form_defect.is_some_and(|c| c <= 1e-8);
            m.insert(
                format!("{}/{}", cfg.name, frame.name()),
                crate::report::decomposition(&d),
            );
        }
    }
    Ok((pass, Value::Object(m)))
}

fn factorization() -> Result<(bool, Value), String> {
    let a = random_state(1, 0, &mut ChaCha8Rng::seed_from_u64(11)).sigma;
    let b = random_state(1, 0, &mut ChaCha8Rng::seed_from_u64(12)).sigma;
    let joint = collapse_sim_core::gaussian::product_state(&[a.clone(), b.clone()]);
    let m = [
        meter_covariance(1.0, MeterConvention::Swapped),
        meter_covariance(2.0, MeterConvention::Swapped),
    ];
    let mut worst = 0.0f64;
    for y in [[0.1, -0.3, 0.7, 0.2], [1.2, 0.4, -0.5, -0.9], [0.0, 0.0, 0.0, 0.0]] {
        let pj = outcome_density(&joint, &m, &y).map_err(err)?;
        let pa = outcome_density(&a, &m[..1], &y[..2]).map_err(err)?;
        let pb = outcome_density(&b, &m[1..], &y[2..]).map_err(err)?;
        worst = worst.max((pj - pa * pb).abs() / pj);
    }
    Ok((worst <= 1e-10, json!({ "relative_mismatch": worst })))
}

pub fn run_all(opts: &VerifyOptions, mut progress: impl FnMut(&Suite)) -> Vec<Suite> {
    let mut out = Vec::new();
    let mut push = |s: Suite| {
        progress(&s);
        out.push(s);
    };
    push(suite("chart", chart));
    push(suite("symplecticity-huygens", || propagators(opts.dx)));
    push(suite("detector-oracle", || oracle(opts.dx)));
    push(suite("collapse-uncertainty", || collapse_structure(opts)));
    push(suite("collapse-oracle", || collapse_oracle(opts)));
    push(suite("causality-delay", || causality(opts.dx)));
    push(suite("decomposition", || decomposition(opts.dx)));
    push(suite("outcome-factorization", factorization));
    out
}
