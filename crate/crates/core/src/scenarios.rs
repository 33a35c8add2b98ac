//! End-to-end experiments: run the same measurement protocol in both frames,
//! compare on a shared slice, and cross-check against closed-form
//! reassemblies of the final correlators from propagator blocks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};

use crate::dynamics::{
    build_hamiltonian, evolve, integrate_propagator, retarded_delay_check, DelayReport, IntegratorOptions, Propagator,
    QuadraticHamiltonian,
};
use crate::gaussian::{assemble_initial_state, CovarianceState, Detector, Observable};
use crate::geometry::{Chart, Frame};
use crate::lattice::{FieldGrid, FieldKernel, LatticeSpec, Window};
use crate::measurement::{collapse_paper, post_measurement_block, CollapseLedger, MeasurementSpec};
use crate::{Error, Real, Result};

/// Pair count above which a run is refused.
pub const MAX_PAIRS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub name: String,
    pub omega: f64,
    pub lambda: f64,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementConfig {
    pub detector: String,
    pub gain: f64,
    /// Frame in which `time` is given.
    pub frame: Frame,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelChoice {
    /// Exact ground state of the discretized free field.
    LatticeVacuum,
    /// Continuum box vacuum truncated to one mode per site.
    BoxVacuum,
    /// Continuum box modes squeezed by `r`.
    Squeezed(f64),
}

impl KernelChoice {
    pub fn name(&self) -> String {
        match self {
            KernelChoice::LatticeVacuum => "lattice-vacuum".into(),
            KernelChoice::BoxVacuum => "box-vacuum".into(),
            KernelChoice::Squeezed(r) => format!("squeezed({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFamily {
    pub centers: Vec<f64>,
    /// Physical width, held fixed under refinement.
    pub width: f64,
}

impl WindowFamily {
    pub fn evenly_spaced(count: usize, from: f64, to: f64, width: f64) -> Self {
        let centers = if count == 1 {
            vec![(from + to) / 2.0]
        } else {
            (0..count)
                .map(|k| from + (to - from) * k as f64 / (count - 1) as f64)
                .collect()
        };
        WindowFamily { centers, width }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub amplitude: f64,
    pub half_width: f64,
    pub dx: f64,
    pub detectors: Vec<DetectorConfig>,
    pub kernel: KernelChoice,
    pub measurements: Vec<MeasurementConfig>,
    /// Index `n` of the overlap slice `t = eta = n pi` used for comparison.
    pub compare_slice: i32,
    pub windows: WindowFamily,
    pub integrator: IntegratorOptions,
    /// Relative Frobenius gate for frame consistency.
    pub tolerance: f64,
    /// Courant number for the light-cone check.
    pub causality_courant: f64,
}

/// Reference resolution.
pub const REFERENCE_DX: f64 = PI / 256.0;

impl ScenarioConfig {
    fn base(name: &str, detectors: Vec<DetectorConfig>, measurements: Vec<MeasurementConfig>) -> Self {
        ScenarioConfig {
            name: name.into(),
            amplitude: 0.5,
            half_width: 3.0 * PI,
            dx: REFERENCE_DX,
            detectors,
            kernel: KernelChoice::LatticeVacuum,
            measurements,
            compare_slice: 1,
            windows: WindowFamily::evenly_spaced(9, -2.0 * PI, PI, 8.0 * REFERENCE_DX),
            integrator: IntegratorOptions::default(),
            tolerance: 1e-2,
            causality_courant: 0.995,
        }
    }

    fn detector(name: &str, position: f64) -> DetectorConfig {
        DetectorConfig {
            name: name.into(),
            omega: 1.0,
            lambda: 0.4,
            position,
        }
    }

    fn measure(detector: &str, time: f64) -> MeasurementConfig {
        MeasurementConfig {
            detector: detector.into(),
            gain: 1.0,
            frame: Frame::T,
            time,
        }
    }

    /// One detector at the origin, measured once at `t = pi/2`.
    pub fn single_measurement() -> Self {
        Self::base(
            "single-measurement",
            vec![Self::detector("A", 0.0)],
            vec![Self::measure("A", PI / 2.0)],
        )
    }

    /// The same detector measured at `t = pi/3` and `t = 2 pi/3`.
    pub fn two_successive() -> Self {
        Self::base(
            "two-successive",
            vec![Self::detector("A", 0.0)],
            vec![Self::measure("A", PI / 3.0), Self::measure("A", 2.0 * PI / 3.0)],
        )
    }

    /// Detectors at `-pi` and `0`, measured at spacelike separation in an
    /// order the eta frame reverses.
    pub fn spacelike_pair() -> Self {
        Self::base(
            "spacelike-pair",
            vec![Self::detector("A", -PI), Self::detector("B", 0.0)],
            vec![Self::measure("A", PI / 3.0), Self::measure("B", PI / 2.0)],
        )
    }

    /// Detectors at `-pi` and `0`, measured at timelike separation; compared
    /// on the second overlap slice so both events fit before it.
    pub fn timelike_pair() -> Self {
        let mut c = Self::base(
            "timelike-pair",
            vec![Self::detector("A", -PI), Self::detector("B", 0.0)],
            vec![Self::measure("A", PI / 6.0), Self::measure("B", 4.0 * PI / 3.0)],
        );
        c.compare_slice = 2;
        c
    }

    pub fn with_dx(&self, dx: f64) -> Self {
        ScenarioConfig { dx, ..self.clone() }
    }

    pub fn compare_time(&self) -> f64 {
        self.compare_slice as f64 * PI
    }

    pub fn detector_index(&self, name: &str) -> Result<usize> {
        self.detectors
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Scenario(format!("unknown detector {name:?}")))
    }

    /// Checks the parts of the config that do not need a lattice.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.amplitude) {
            return Err(Error::InvalidAmplitude(self.amplitude));
        }
        if self.compare_slice < 1 {
            return Err(Error::Scenario(
                "comparison slice must be a positive multiple of pi".into(),
            ));
        }
        if self.detectors.is_empty() {
            return Err(Error::Scenario("no detectors".into()));
        }
        for (i, d) in self.detectors.iter().enumerate() {
            if self.detectors[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Scenario(format!("detector name {:?} repeated", d.name)));
            }
            if !(d.omega > 0.0) || !(d.lambda >= 0.0) {
                return Err(Error::Scenario(format!(
                    "detector {:?} needs omega > 0, lambda >= 0",
                    d.name
                )));
            }
            if d.position.abs() >= self.half_width {
                return Err(Error::Scenario(format!("detector {:?} outside the box", d.name)));
            }
        }
        for m in &self.measurements {
            self.detector_index(&m.detector)?;
            if !(m.gain > 0.0) {
                return Err(Error::Scenario("measurement gain must be positive".into()));
            }
        }
        if self.windows.centers.is_empty() {
            return Err(Error::Scenario("no comparison windows".into()));
        }
        for &c in &self.windows.centers {
            Window::new(c, self.windows.width, self.half_width)?;
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Scenario("tolerance must be non-negative".into()));
        }
        Ok(())
    }

    fn lattice<T: Real>(&self) -> Result<LatticeSpec<T>> {
        let l = LatticeSpec::build(T::lit(self.half_width), T::lit(self.dx))?;
        if l.n_sites + self.detectors.len() > MAX_PAIRS {
            return Err(Error::Scenario(format!(
                "{} pairs exceed the limit of {MAX_PAIRS}",
                l.n_sites + self.detectors.len()
            )));
        }
        Ok(l)
    }

    fn engine_detectors<T: Real>(&self) -> Vec<Detector<T>> {
        self.detectors
            .iter()
            .map(|d| Detector {
                name: d.name.clone(),
                omega: T::lit(d.omega),
                lambda: T::lit(d.lambda),
                position: T::lit(d.position),
            })
            .collect()
    }

    fn kernel<T: Real>(&self, lattice: &LatticeSpec<T>) -> FieldKernel<T> {
        match self.kernel {
            KernelChoice::LatticeVacuum => FieldKernel::lattice_vacuum(lattice),
            KernelChoice::BoxVacuum => FieldKernel::box_vacuum(lattice.half_width, lattice.n_sites),
            KernelChoice::Squeezed(r) => FieldKernel::squeezed(lattice.half_width, lattice.n_sites, T::lit(r)),
        }
    }
}

/// A measurement placed on a slice of one frame.
#[derive(Debug, Clone, Copy)]
pub struct ScheduledEvent<T> {
    /// Position in `ScenarioConfig::measurements`.
    pub index: usize,
    pub detector: usize,
    pub gain: T,
    pub proper_time: T,
    pub slice_time: T,
}

/// Places every measurement on its slice in `frame` via the detectors'
/// proper time, sorted by slice time.
pub fn schedule<T: Real>(cfg: &ScenarioConfig, frame: Frame) -> Result<Vec<ScheduledEvent<T>>> {
    let chart = Chart::new(T::lit(cfg.amplitude))?;
    let end = T::lit(cfg.compare_time());
    let mut out = Vec::new();
    for (index, m) in cfg.measurements.iter().enumerate() {
        let detector = cfg.detector_index(&m.detector)?;
        let x = T::lit(cfg.detectors[detector].position);
        let tau = chart.worldline_clock(x, m.frame)?.proper_time(T::lit(m.time));
        let slice_time = chart.worldline_clock(x, frame)?.coord_time(tau);
        if !(slice_time > T::zero() && slice_time < end) {
            return Err(Error::Scenario(format!(
                "measurement {index} falls at {frame} = {} outside (0, {})",
                slice_time.as_f64(),
                end.as_f64()
            )));
        }
        out.push(ScheduledEvent {
            index,
            detector,
            gain: T::lit(m.gain),
            proper_time: tau,
            slice_time,
        });
    }
    out.sort_by(|a, b| a.slice_time.partial_cmp(&b.slice_time).expect("finite times"));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EventRecord<T> {
    pub event: ScheduledEvent<T>,
    /// Marginal of all detectors just before the collapse.
    pub detectors_before: DMatrix<T>,
    pub ledger: CollapseLedger<T>,
}

#[derive(Debug, Clone)]
pub struct FrameRun<T> {
    pub frame: Frame,
    pub events: Vec<EventRecord<T>>,
    pub final_state: CovarianceState<T>,
    pub labels: Vec<String>,
    pub correlators: DMatrix<T>,
    pub observables: Vec<Observable<T>>,
    pub max_defect: f64,
    /// Initial state and segment propagators, present when requested.
    pub history: Option<History<T>>,
}

#[derive(Debug, Clone)]
pub struct History<T> {
    pub initial: CovarianceState<T>,
    /// `segments[k]` runs from the slice of event `k - 1` (or 0) to that of
    /// event `k` (or the comparison time).
    pub segments: Vec<Propagator<T>>,
}

/// The comparison observables on overlap slice `n`: field and momentum
/// windows at each center, then every detector's `Q` and `P`.
pub fn comparison_observables<T: Real>(
    cfg: &ScenarioConfig,
    grid: &FieldGrid<T>,
    chart: &Chart<T>,
) -> Result<Vec<Observable<T>>> {
    let slice = chart.overlap_slice(cfg.compare_slice);
    let layout = crate::gaussian::PhaseSpaceLayout::new(cfg.detectors.len(), grid.n_sites());
    let mut obs = Vec::new();
    let mut momenta = Vec::new();
    for (k, &c) in cfg.windows.centers.iter().enumerate() {
        let w = Window::new(T::lit(c), T::lit(cfg.windows.width), grid.half_width)?;
        let a = w.field_coeffs(grid, &slice)?;
        let b = w.momentum_coeffs(grid, &slice)?;
        let keep = |v: &[T], idx: &dyn Fn(usize) -> usize| -> Vec<(usize, T)> {
            v.iter()
                .enumerate()
                .filter(|(_, c)| **c != T::zero())
                .map(|(i, &c)| (idx(i), c))
                .collect()
        };
        obs.push(Observable {
            label: format!("phi[{k}]"),
            coeffs: keep(&a, &|i| layout.phi(i)),
        });
        momenta.push(Observable {
            label: format!("pi[{k}]"),
            coeffs: keep(&b, &|i| layout.pi(i)),
        });
    }
    obs.extend(momenta);
    for (d, det) in cfg.detectors.iter().enumerate() {
        obs.push(Observable::coordinate(format!("Q_{}", det.name), layout.q(d)));
        obs.push(Observable::coordinate(format!("P_{}", det.name), layout.p(d)));
    }
    Ok(obs)
}

struct Setup<T> {
    hamiltonian: QuadraticHamiltonian<T>,
    initial: CovarianceState<T>,
    chart: Chart<T>,
}

fn setup<T: Real>(cfg: &ScenarioConfig, frame: Frame) -> Result<Setup<T>> {
    cfg.validate()?;
    let lattice = cfg.lattice::<T>()?;
    let chart = Chart::new(T::lit(cfg.amplitude))?;
    let dets = cfg.engine_detectors::<T>();
    let hamiltonian = build_hamiltonian(frame, &lattice, &dets, &chart)?;
    let initial = assemble_initial_state(&hamiltonian.grid, &dets, &cfg.kernel(&lattice), &chart)?;
    Ok(Setup {
        hamiltonian,
        initial,
        chart,
    })
}

fn segment<T: Real>(
    h: &QuadraticHamiltonian<T>,
    t_a: T,
    t_b: T,
    opts: &IntegratorOptions,
    max_defect: &mut f64,
) -> Result<Propagator<T>> {
    if t_b == t_a {
        return Ok(Propagator::identity(h.frame, h.layout.dim(), t_a));
    }
    let p = integrate_propagator(h, t_a, t_b, opts)?;
    if let Some(d) = p.defect {
        *max_defect = max_defect.max(d.as_f64());
    }
    Ok(p)
}

/// Runs the scenario in one frame: evolve between the frame's measurement
/// slices, collapse on each, and stop on the comparison slice.
pub fn run_one_frame<T: Real>(cfg: &ScenarioConfig, frame: Frame, keep_history: bool) -> Result<FrameRun<T>> {
    let Setup {
        hamiltonian: h,
        initial,
        chart,
    } = setup::<T>(cfg, frame)?;
    let events = schedule::<T>(cfg, frame)?;
    let all: Vec<usize> = (0..cfg.detectors.len()).collect();
    let mut state = initial.clone();
    let mut segments = Vec::new();
    let mut records = Vec::new();
    let mut max_defect = 0.0f64;
    for ev in &events {
        let p = segment(&h, state.time, ev.slice_time, &cfg.integrator, &mut max_defect)?;
        state = evolve(&state, &p)?;
        if keep_history {
            segments.push(p);
        }
        let detectors_before = state.marginal(&all);
        let spec = MeasurementSpec {
            detector: ev.detector,
            g: ev.gain,
            frame,
            time: ev.slice_time,
        };
        let (next, ledger) = collapse_paper(&state, &spec)?;
        state = next;
        records.push(EventRecord {
            event: *ev,
            detectors_before,
            ledger,
        });
    }
    let p = segment(
        &h,
        state.time,
        T::lit(cfg.compare_time()),
        &cfg.integrator,
        &mut max_defect,
    )?;
    state = evolve(&state, &p)?;
    if keep_history {
        segments.push(p);
    }
    let observables = comparison_observables(cfg, &h.grid, &chart)?;
    let correlators = state.correlators(&observables);
    Ok(FrameRun {
        frame,
        events: records,
        labels: observables.iter().map(|o| o.label.clone()).collect(),
        correlators,
        observables,
        final_state: state,
        max_defect,
        history: keep_history.then_some(History { initial, segments }),
    })
}

#[derive(Debug, Clone)]
pub struct EventComparison {
    pub measurement: usize,
    pub detector: String,
    /// `|| B_t - B_eta ||_F / || B_t ||_F` for the measured detector's block
    /// just before collapse.
    pub rel_difference: f64,
}

#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub labels: Vec<String>,
    /// Entrywise `|C_t - C_eta|`.
    pub abs_differences: DMatrix<f64>,
    pub max_abs: f64,
    pub rel_frobenius: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub events: Vec<EventComparison>,
}

fn frob(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn to_f64<T: Real>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|v| v.as_f64())
}

pub fn compare_frames<T: Real>(cfg: &ScenarioConfig, t: &FrameRun<T>, eta: &FrameRun<T>) -> Result<ConsistencyReport> {
    if t.frame != Frame::T || eta.frame != Frame::Eta {
        return Err(Error::Scenario("compare_frames wants a t run and an eta run".into()));
    }
    if t.labels != eta.labels {
        return Err(Error::Scenario("observable sets differ".into()));
    }
    let (ct, ce) = (to_f64(&t.correlators), to_f64(&eta.correlators));
    let diff = (&ct - &ce).abs();
    let max_abs = diff.max();
    let rel_frobenius = frob(&diff) / frob(&ct);
    let mut events = Vec::new();
    for rt in &t.events {
        let re = eta
            .events
            .iter()
            .find(|r| r.event.index == rt.event.index)
            .ok_or_else(|| Error::Scenario("event missing in eta run".into()))?;
        let d = rt.event.detector;
        let bt = to_f64(&rt.detectors_before.view((2 * d, 2 * d), (2, 2)).into_owned());
        let be = to_f64(&re.detectors_before.view((2 * d, 2 * d), (2, 2)).into_owned());
        events.push(EventComparison {
            measurement: rt.event.index,
            detector: cfg.detectors[d].name.clone(),
            rel_difference: frob(&(&bt - &be)) / frob(&bt),
        });
    }
    Ok(ConsistencyReport {
        labels: t.labels.clone(),
        abs_differences: diff,
        max_abs,
        rel_frobenius,
        tolerance: cfg.tolerance,
        pass: rel_frobenius <= cfg.tolerance,
        events,
    })
}

pub struct FramePair<T> {
    pub t: FrameRun<T>,
    pub eta: FrameRun<T>,
    pub report: ConsistencyReport,
}

pub fn run_both<T: Real>(cfg: &ScenarioConfig, keep_history: bool) -> Result<FramePair<T>> {
    let t = run_one_frame::<T>(cfg, Frame::T, keep_history)?;
    let eta = run_one_frame::<T>(cfg, Frame::Eta, keep_history)?;
    let report = compare_frames(cfg, &t, &eta)?;
    Ok(FramePair { t, eta, report })
}

#[derive(Debug, Clone)]
pub struct SweepLevel {
    pub dx: f64,
    pub n_sites: usize,
    pub report: ConsistencyReport,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub levels: Vec<SweepLevel>,
    /// `log2(e_k / e_{k+1})` between consecutive levels.
    pub orders: Vec<f64>,
    pub strictly_decreasing: bool,
}

/// Halves `dx` `levels - 1` times starting from the config's resolution.
/// `visit` sees each level as it finishes.
pub fn refinement_sweep<T: Real>(
    cfg: &ScenarioConfig,
    levels: usize,
    mut visit: impl FnMut(&SweepLevel),
) -> Result<SweepReport> {
    if levels < 2 {
        return Err(Error::Scenario("a sweep needs at least two levels".into()));
    }
    let finest = cfg.with_dx(cfg.dx / f64::powi(2.0, levels as i32 - 1));
    finest.lattice::<T>()?;
    let mut out = Vec::new();
    for k in 0..levels {
        let c = cfg.with_dx(cfg.dx / f64::powi(2.0, k as i32));
        let pair = run_both::<T>(&c, false)?;
        let level = SweepLevel {
            dx: c.lattice::<T>()?.dx.as_f64(),
            n_sites: pair.t.final_state.layout.n_sites,
            report: pair.report,
        };
        visit(&level);
        out.push(level);
    }
    let errs: Vec<f64> = out.iter().map(|l| l.report.rel_frobenius).collect();
    Ok(SweepReport {
        orders: errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect(),
        strictly_decreasing: errs.windows(2).all(|w| w[1] < w[0]),
        levels: out,
    })
}

/// Interval class of two measurement events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Separation {
    Spacelike,
    Timelike,
}

/// Minkowski coordinates of each measurement event, in config order.
pub fn event_coordinates(cfg: &ScenarioConfig) -> Result<Vec<(f64, f64)>> {
    let chart = Chart::new(cfg.amplitude)?;
    cfg.measurements
        .iter()
        .map(|m| {
            let x = cfg.detectors[cfg.detector_index(&m.detector)?].position;
            Ok((chart.worldline_clock(x, m.frame)?.proper_time(m.time), x))
        })
        .collect()
}

/// Classifies a two-event config, refusing events within `4 dx` of the light
/// cone.
pub fn classify(cfg: &ScenarioConfig) -> Result<Separation> {
    let ev = event_coordinates(cfg)?;
    if ev.len() != 2 || cfg.measurements[0].detector == cfg.measurements[1].detector {
        return Err(Error::Scenario(
            "order swap needs one measurement on each of two detectors".into(),
        ));
    }
    let dt = (ev[1].0 - ev[0].0).abs();
    let dist = (ev[1].1 - ev[0].1).abs();
    let margin = 4.0 * cfg.dx;
    if dt < dist - margin {
        Ok(Separation::Spacelike)
    } else if dt > dist + margin {
        Ok(Separation::Timelike)
    } else {
        Err(Error::Scenario(format!(
            "events are within {margin} of light-like separation (|dt| = {dt}, |dx| = {dist})"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct OrderSwapReport {
    pub separation: Separation,
    /// Detector names in execution order, per frame.
    pub order_t: Vec<String>,
    pub order_eta: Vec<String>,
    pub consistency: ConsistencyReport,
    /// Relative Frobenius change of the t-frame observables when the two
    /// collapses are applied in the opposite order.
    pub in_frame_swap: f64,
    /// Response of the later-measured detector to the earlier one's initial
    /// data, at the light-cone Courant number.
    pub influence: DelayReport,
}

/// Applies the t-frame protocol with the two collapses in reverse order: go
/// to the later slice, collapse there, step back with the inverse
/// propagator, collapse the earlier event, then continue forward.
pub fn swapped_order_correlators<T: Real>(run: &FrameRun<T>) -> Result<DMatrix<T>> {
    let hist = run
        .history
        .as_ref()
        .ok_or_else(|| Error::Scenario("order swap needs the run history".into()))?;
    if run.events.len() != 2 {
        return Err(Error::Scenario("order swap needs exactly two events".into()));
    }
    let (e1, e2) = (&run.events[0].event, &run.events[1].event);
    let [s10, s21, s32] = [&hist.segments[0], &hist.segments[1], &hist.segments[2]];
    let spec = |e: &ScheduledEvent<T>| MeasurementSpec {
        detector: e.detector,
        g: e.gain,
        frame: run.frame,
        time: e.slice_time,
    };
    let mut state = evolve(&hist.initial, &s21.after(s10)?)?;
    state = collapse_paper(&state, &spec(e2))?.0;
    state = evolve(&state, &s21.inverse())?;
    state = collapse_paper(&state, &spec(e1))?.0;
    state = evolve(&state, s21)?;
    state = evolve(&state, s32)?;
    Ok(state.correlators(&run.observables))
}

pub fn order_swap_experiment<T: Real>(cfg: &ScenarioConfig) -> Result<(OrderSwapReport, FramePair<T>)> {
    let separation = classify(cfg)?;
    let pair = run_both::<T>(cfg, true)?;
    let names = |r: &FrameRun<T>| -> Vec<String> {
        r.events
            .iter()
            .map(|e| cfg.detectors[e.event.detector].name.clone())
            .collect()
    };
    let swapped = to_f64(&swapped_order_correlators(&pair.t)?);
    let normal = to_f64(&pair.t.correlators);
    let in_frame_swap = frob(&(&normal - &swapped)) / frob(&normal);

    let first = pair.t.events[0].event.detector;
    let second = pair.t.events[1].event.detector;
    let lattice = cfg.lattice::<T>()?;
    let h = build_hamiltonian(
        Frame::T,
        &lattice,
        &cfg.engine_detectors::<T>(),
        &Chart::new(T::lit(cfg.amplitude))?,
    )?;
    let distance = (cfg.detectors[first].position - cfg.detectors[second].position).abs();
    let opts = IntegratorOptions {
        dt_factor: cfg.causality_courant,
        symplectic_tol: None,
        ..cfg.integrator
    };
    let influence = retarded_delay_check(&h, first, second, T::lit(distance + 1.0), &opts)?;
    Ok((
        OrderSwapReport {
            separation,
            order_t: names(&pair.t),
            order_eta: names(&pair.eta),
            consistency: pair.report.clone(),
            in_frame_swap,
            influence,
        },
        pair,
    ))
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    /// `max |Sigma_engine - Sigma_reassembled|` over the field block, using
    /// the nested per-event reassembly.
    pub nested_defect: f64,
    /// Same for the closed one- or two-detector formula, when it applies.
    pub closed_form_defect: Option<f64>,
    /// Largest response of the second-measured detector at its slice to the
    /// first one's variables at the first slice; the two-detector formula
    /// assumes it vanishes.
    pub mutual_influence: Option<f64>,
    pub scale: f64,
}

/// `-c M c'^T` with `M` built from the pre-collapse block and the prepared
/// block `d`: the correlator correction of one collapse given the
/// pre-collapse pairings `c` (rows against `Q`, `P`).
fn correction<T: Real>(c: &DMatrix<T>, c2: &DMatrix<T>, pre: &Matrix2<T>, d: &Matrix2<T>) -> DMatrix<T> {
    let ell = d[(0, 0)] + pre[(1, 1)];
    let ell_bar = d[(1, 1)] + pre[(0, 0)];
    let qp = pre[(0, 1)];
    let j = ell * ell_bar - qp * qp;
    let m = DMatrix::from_row_slice(2, 2, &[ell / j, -qp / j, -qp / j, ell_bar / j]);
    -(c * m * c2.transpose())
}

fn cols<T: Real>(m: &DMatrix<T>, idx: [usize; 2]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), 2, |r, k| m[(r, idx[k])])
}

fn rows<T: Real>(m: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

fn block2<T: Real>(m: &DMatrix<T>) -> Matrix2<T> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

/// Correlators of the rows of `u` (functionals on the post-collapse state at
/// event slice `k`, or on the initial state for `k = 0`).
fn nested<T: Real>(hist: &History<T>, events: &[EventRecord<T>], k: usize, u: &DMatrix<T>) -> Result<DMatrix<T>> {
    if k == 0 {
        return Ok(u * &hist.initial.sigma * u.transpose());
    }
    let ev = &events[k - 1];
    let l = hist.initial.layout;
    let idx = [l.q(ev.event.detector), l.p(ev.event.detector)];
    let r = u.nrows();
    let ud = cols(u, idx);
    let mut y = DMatrix::zeros(r + 2, u.ncols());
    y.rows_mut(0, r).copy_from(u);
    for (j, &i) in idx.iter().enumerate() {
        y.column_mut(i).fill(T::zero());
        y[(r + j, i)] = T::one();
    }
    let y = y * &hist.segments[k - 1].s;
    let c = nested(hist, events, k - 1, &y)?;
    let cx = c.view((0, r), (r, 2)).into_owned();
    let pre = block2(&c.view((r, r), (2, 2)).into_owned());
    let d = post_measurement_block(ev.event.gain);
    let dm = DMatrix::from_fn(2, 2, |a, b| d[(a, b)]);
    Ok(&ud * dm * ud.transpose() + c.view((0, 0), (r, r)) + correction(&cx, &cx, &pre, &d))
}

struct FirstCollapse<T> {
    rows: DMatrix<T>,
    pre: Matrix2<T>,
    d: Matrix2<T>,
    dm: DMatrix<T>,
}

impl<T: Real> FirstCollapse<T> {
    fn new(s10: &DMatrix<T>, idx: [usize; 2], sigma0: &DMatrix<T>, gain: T) -> Self {
        let rows = rows(s10, &idx);
        let pre = block2(&(&rows * sigma0 * rows.transpose()));
        let d = post_measurement_block(gain);
        FirstCollapse {
            rows,
            pre,
            d,
            dm: DMatrix::from_fn(2, 2, |a, b| d[(a, b)]),
        }
    }

    /// Pairing of the initial-data functionals `x`, `y` after the collapse,
    /// with `xf`, `yf` their coefficients on the measured detector.
    fn pair(
        &self,
        sigma0: &DMatrix<T>,
        x: &DMatrix<T>,
        xf: &DMatrix<T>,
        y: &DMatrix<T>,
        yf: &DMatrix<T>,
    ) -> DMatrix<T> {
        let xs = x * sigma0;
        let cx = &xs * self.rows.transpose();
        let cy = y * sigma0 * self.rows.transpose();
        xf * &self.dm * yf.transpose() + &xs * y.transpose() + correction(&cx, &cy, &self.pre, &self.d)
    }
}

/// Reassembles the final field-field block from the run's propagators and
/// compares it with the engine's state.
pub fn paper_decomposition_check<T: Real>(run: &FrameRun<T>) -> Result<DecompositionReport> {
    let hist = run
        .history
        .as_ref()
        .ok_or_else(|| Error::Scenario("decomposition needs the run history".into()))?;
    let l = hist.initial.layout;
    let fields: Vec<usize> = (0..l.n_sites).map(|i| l.phi(i)).collect();
    let engine = run.final_state.block(&fields);
    let m = run.events.len();
    let top = rows(&hist.segments[m].s, &fields);
    let nested_sigma = nested(hist, &run.events, m, &top)?;
    let defect = |s: &DMatrix<T>| linalg_max(&(&engine - s));
    let nested_defect = defect(&nested_sigma);
    let sigma0 = &hist.initial.sigma;
    let det_idx = |e: &EventRecord<T>| [l.q(e.event.detector), l.p(e.event.detector)];

    let (closed_form_defect, mutual_influence) = match m {
        1 => {
            // final = S_T1 S_10 with one collapse between
            let f = det_idx(&run.events[0]);
            let first = FirstCollapse::new(&hist.segments[0].s, f, sigma0, run.events[0].event.gain);
            let st1 = &top;
            let st0 = st1 * &hist.segments[0].s;
            let vf = cols(st1, f);
            let u = st0 - &vf * &first.rows;
            let sigma = first.pair(sigma0, &u, &vf, &u, &vf);
            (Some(defect(&sigma)), None)
        }
        2 if run.events[0].event.detector != run.events[1].event.detector => {
            let (ef, eg) = (&run.events[0], &run.events[1]);
            let (f, g) = (det_idx(ef), det_idx(eg));
            let (s10, s21) = (&hist.segments[0].s, &hist.segments[1].s);
            let first = FirstCollapse::new(s10, f, sigma0, ef.event.gain);
            let s32 = &top;
            let s31 = s32 * s21;
            let s30 = &s31 * s10;
            let s21g = rows(s21, &g);
            let s20g = &s21g * s10;
            let s21gf = cols(&s21g, f);
            let s31f = cols(&s31, f);
            let s32g = cols(s32, g);
            // initial-data parts of the final field and of G's variables at
            // its slice, with the collapsed detectors' own terms removed
            let u = s30 - &s31f * &first.rows - &s32g * &s20g;
            let qg = &s20g - &s21gf * &first.rows;
            let cxg = first.pair(sigma0, &u, &s31f, &qg, &s21gf);
            let pre_g = block2(&first.pair(sigma0, &qg, &s21gf, &qg, &s21gf));
            let dg = post_measurement_block(eg.event.gain);
            let dgm = DMatrix::from_fn(2, 2, |a, b| dg[(a, b)]);
            let sigma = &s32g * dgm * s32g.transpose()
                + first.pair(sigma0, &u, &s31f, &u, &s31f)
                + correction(&cxg, &cxg, &pre_g, &dg);
            (Some(defect(&sigma)), Some(linalg_max(&s21gf)))
        }
        _ => (None, None),
    };
    Ok(DecompositionReport {
        nested_defect,
        closed_form_defect,
        mutual_influence,
        scale: linalg_max(&engine),
    })
}

fn linalg_max<T: Real>(m: &DMatrix<T>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs().as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse(mut c: ScenarioConfig) -> ScenarioConfig {
        c.dx = PI / 16.0;
        c.windows.width = PI / 16.0;
        c
    }

    #[test]
    fn schedule_matches_worldline_clock() {
        let c = ScenarioConfig::single_measurement();
        let t = schedule::<f64>(&c, Frame::T).unwrap();
        let e = schedule::<f64>(&c, Frame::Eta).unwrap();
        assert!((t[0].slice_time - PI / 2.0).abs() < 1e-14);
        assert!((e[0].slice_time - (PI - 1.0) / 2.0).abs() < 1e-12);
        let s = ScenarioConfig::spacelike_pair();
        let t = schedule::<f64>(&s, Frame::T).unwrap();
        let e = schedule::<f64>(&s, Frame::Eta).unwrap();
        assert_eq!((t[0].detector, t[1].detector), (0, 1));
        assert_eq!((e[0].detector, e[1].detector), (1, 0));
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::single_measurement();
        c.measurements[0].time = 4.0;
        assert!(matches!(schedule::<f64>(&c, Frame::T), Err(Error::Scenario(_))));
        let mut c = ScenarioConfig::single_measurement();
        c.windows.centers.push(-2.9 * PI);
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::single_measurement();
        c.measurements[0].detector = "Z".into();
        assert!(c.validate().is_err());
        let c = ScenarioConfig::single_measurement().with_dx(PI / 2048.0);
        assert!(run_one_frame::<f64>(&c, Frame::T, false).is_err());
        assert!(refinement_sweep::<f64>(&coarse(ScenarioConfig::single_measurement()), 1, |_| {}).is_err());
    }

    #[test]
    fn classification() {
        assert_eq!(
            classify(&ScenarioConfig::spacelike_pair()).unwrap(),
            Separation::Spacelike
        );
        assert_eq!(
            classify(&ScenarioConfig::timelike_pair()).unwrap(),
            Separation::Timelike
        );
        let mut c = ScenarioConfig::spacelike_pair();
        c.measurements[1].time = PI / 3.0 + PI + 0.5 * c.dx;
        c.compare_slice = 2;
        assert!(classify(&c).is_err());
        assert!(classify(&ScenarioConfig::single_measurement()).is_err());
    }

    #[test]
    fn flat_chart_frames_agree() {
        let mut c = coarse(ScenarioConfig::spacelike_pair());
        c.amplitude = 0.0;
        let p = run_both::<f64>(&c, false).unwrap();
        assert!(p.report.rel_frobenius < 1e-12, "{}", p.report.rel_frobenius);
    }

    #[test]
    fn collapse_sets_detector_block() {
        let c = coarse(ScenarioConfig::single_measurement());
        let r = run_one_frame::<f64>(&c, Frame::T, false).unwrap();
        assert_eq!(r.events.len(), 1);
        let l = &r.events[0].ledger;
        assert_eq!(l.post, Matrix2::new(0.5, 0.0, 0.0, 0.5));
        assert!(r.max_defect < 1e-10);
    }

    #[test]
    fn decomposition_is_exact_on_coarse_lattices() {
        for c in [
            ScenarioConfig::single_measurement(),
            ScenarioConfig::two_successive(),
            ScenarioConfig::spacelike_pair(),
        ] {
            for frame in [Frame::T, Frame::Eta] {
                let r = run_one_frame::<f64>(&coarse(c.clone()), frame, true).unwrap();
                let d = paper_decomposition_check(&r).unwrap();
                assert!(d.nested_defect < 1e-11, "{} {frame}: {}", c.name, d.nested_defect);
                if let Some(cf) = d.closed_form_defect {
                    assert!(cf < 1e-11, "{} {frame}: closed form {cf}", c.name);
                }
            }
        }
    }

    #[test]
    fn free_field_has_no_collapse_terms() {
        let mut c = coarse(ScenarioConfig::single_measurement());
        c.detectors[0].lambda = 0.0;
        c.measurements.clear();
        let r = run_one_frame::<f64>(&c, Frame::T, true).unwrap();
        let d = paper_decomposition_check(&r).unwrap();
        assert!(d.nested_defect < 1e-10);
        assert!(r.events.is_empty());
    }

    #[test]
    fn uncoupled_collapses_commute() {
        let mut c = coarse(ScenarioConfig::timelike_pair());
        for d in &mut c.detectors {
            d.lambda = 0.0;
        }
        let r = run_one_frame::<f64>(&c, Frame::T, true).unwrap();
        let s = swapped_order_correlators(&r).unwrap();
        assert!((&s - &r.correlators).abs().max() < 1e-10);
    }
}
