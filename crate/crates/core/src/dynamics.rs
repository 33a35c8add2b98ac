//! Quadratic Hamiltonians and their symplectic propagators.
//!
//! In either frame the lattice Hamiltonian is
//!
//! ```text
//! H(s) = sum_i pi_i^2/(2 c_i) + sum_b (dPhi_b)^2/(2 h_b)
//!      + sum_d N_d(s) [ (P_d - lambda_d Phi_{i_d})^2 + omega_d^2 Q_d^2 ] / 2
//! ```
//!
//! with `N_d = d tau_d / ds` the detector lapse (1 in the t frame). The
//! default integrator splits `H` into three pieces whose flows are exact
//! shears (field kinetic drift, potential kick, detector coupling) and
//! composes them symmetrically, so every step is exactly symplectic. The time
//! dependence enters only through `N_d`, sampled at the step midpoint.
//!
//! Steps are anchored to the global grid `s = k dt`; an interval that starts
//! or ends between grid points gets a partial first or last step. Propagators
//! over adjacent intervals therefore compose to the propagator of the union
//! up to roundoff whenever the split point is a grid point.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::gaussian::{CovarianceState, Detector, PhaseSpaceLayout};
use crate::geometry::{Chart, Frame, WorldlineClock};
use crate::lattice::{FieldGrid, LatticeSpec};
use crate::linalg;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Symmetric composition of exactly solvable quadratic flows.
    Splitting,
    /// Classical fourth-order Runge-Kutta on `z' = J h(s) z`.
    Rk4,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "splitting" => Some(Scheme::Splitting),
            "rk4" => Some(Scheme::Rk4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Splitting => "splitting",
            Scheme::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    /// Time step in units of the lattice spacing `dx`.
    pub dt_factor: f64,
    pub scheme: Scheme,
    /// Reject propagators whose symplectic defect exceeds this (costs one
    /// dense product per propagator).
    pub symplectic_tol: Option<f64>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            dt_factor: 0.4,
            scheme: Scheme::Splitting,
            symplectic_tol: Some(1e-8),
        }
    }
}

#[derive(Debug, Clone)]
struct Coupling<T> {
    omega: T,
    lambda: T,
    site: usize,
    clock: WorldlineClock<T>,
}

#[derive(Debug, Clone)]
pub struct QuadraticHamiltonian<T> {
    pub frame: Frame,
    pub layout: PhaseSpaceLayout,
    pub grid: FieldGrid<T>,
    pub dx: T,
    couplings: Vec<Coupling<T>>,
    inv_cells: Vec<T>,
    inv_bonds: Vec<T>,
}

pub fn build_hamiltonian<T: Real>(
    frame: Frame,
    lattice: &LatticeSpec<T>,
    detectors: &[Detector<T>],
    chart: &Chart<T>,
) -> Result<QuadraticHamiltonian<T>> {
    let grid = FieldGrid::for_frame(lattice, frame, chart);
    let mut couplings = Vec::with_capacity(detectors.len());
    let mut seen = Vec::new();
    for d in detectors {
        let site = lattice.site_index(d.position)?;
        if seen.contains(&site) {
            return Err(Error::Lattice(format!("two detectors share site {site}")));
        }
        seen.push(site);
        couplings.push(Coupling {
            omega: d.omega,
            lambda: d.lambda,
            site,
            clock: chart.worldline_clock(d.position, frame)?,
        });
    }
    Ok(QuadraticHamiltonian {
        frame,
        layout: PhaseSpaceLayout::new(detectors.len(), lattice.n_sites),
        inv_cells: grid.cells.iter().map(|&c| T::one() / c).collect(),
        inv_bonds: grid.bonds.iter().map(|&b| T::one() / b).collect(),
        grid,
        dx: lattice.dx,
        couplings,
    })
}

impl<T: Real> QuadraticHamiltonian<T> {
    pub fn lapse(&self, d: usize, s: T) -> T {
        self.couplings[d].clock.redshift(s)
    }

    pub fn detector_site(&self, d: usize) -> usize {
        self.couplings[d].site
    }

    fn lapses(&self, s: T) -> Vec<T> {
        (0..self.couplings.len()).map(|d| self.lapse(d, s)).collect()
    }

    /// Dense `h(s)` with `H = z^T h z / 2`.
    pub fn matrix(&self, s: T) -> DMatrix<T> {
        let l = &self.layout;
        let n = l.n_sites;
        let mut h = DMatrix::zeros(l.dim(), l.dim());
        for i in 0..n {
            h[(l.pi(i), l.pi(i))] = self.inv_cells[i];
            h[(l.phi(i), l.phi(i))] = self.inv_bonds[i] + self.inv_bonds[i + 1];
            if i + 1 < n {
                h[(l.phi(i), l.phi(i + 1))] = -self.inv_bonds[i + 1];
                h[(l.phi(i + 1), l.phi(i))] = -self.inv_bonds[i + 1];
            }
        }
        for (d, c) in self.couplings.iter().enumerate() {
            let nd = self.lapse(d, s);
            let (q, p, f) = (l.q(d), l.p(d), l.phi(c.site));
            h[(q, q)] = nd * c.omega * c.omega;
            h[(p, p)] = nd;
            h[(p, f)] = -nd * c.lambda;
            h[(f, p)] = -nd * c.lambda;
            h[(f, f)] += nd * c.lambda * c.lambda;
        }
        h
    }

    /// `<H>` in a zero-mean state.
    pub fn energy(&self, state: &CovarianceState<T>) -> T {
        let h = self.matrix(state.time);
        h.component_mul(&state.sigma).sum() / T::lit(2.0)
    }

    /// Estimate of the largest normal-mode frequency at time `s`, from power
    /// iteration on the field stiffness including the detector-induced
    /// on-site term.
    pub fn omega_max(&self, s: T) -> T {
        let n = self.layout.n_sites;
        let mut diag: Vec<T> = (0..n).map(|i| self.inv_bonds[i] + self.inv_bonds[i + 1]).collect();
        for (d, c) in self.couplings.iter().enumerate() {
            diag[c.site] += self.lapse(d, s) * c.lambda * c.lambda;
        }
        let sc: Vec<T> = self.inv_cells.iter().map(|&v| v.sqrt()).collect();
        let apply = |v: &DVector<T>| {
            DVector::from_fn(n, |i, _| {
                let mut acc = diag[i] * v[i] * sc[i];
                if i > 0 {
                    acc -= self.inv_bonds[i] * v[i - 1] * sc[i - 1];
                }
                if i + 1 < n {
                    acc -= self.inv_bonds[i + 1] * v[i + 1] * sc[i + 1];
                }
                acc * sc[i]
            })
        };
        // staggered start is close to the top mode
        let mut v = DVector::from_fn(n, |i, _| if i % 2 == 0 { T::one() } else { -T::one() });
        v /= v.norm();
        let mut lam = T::zero();
        for _ in 0..400 {
            let w = apply(&v);
            let next = w.dot(&v);
            let norm = w.norm();
            v = w / norm;
            if (next - lam).abs() <= T::lit(1e-14) * next {
                lam = next;
                break;
            }
            lam = next;
        }
        let det_max = self
            .couplings
            .iter()
            .enumerate()
            .map(|(d, c)| self.lapse(d, s) * c.omega)
            .fold(T::zero(), |a, b| a.max(b));
        lam.sqrt().max(det_max)
    }
}

#[derive(Debug, Clone)]
struct Step<T> {
    h: T,
    /// Lapses at the sample times the scheme needs: midpoint for the
    /// splitting, `(start, mid, end)` for RK4.
    lapses: Vec<Vec<T>>,
}

/// Step sizes over `[t_a, t_b]` on the global grid `k dt`.
pub fn step_boundaries<T: Real>(t_a: T, t_b: T, dt: T) -> Vec<T> {
    let snap = T::lit(1e-9);
    let ka = t_a / dt;
    let kb = t_b / dt;
    let first = if (ka - ka.round()).abs() < snap {
        ka.round() + T::one()
    } else {
        ka.ceil()
    };
    let last = if (kb - kb.round()).abs() < snap {
        kb.round() - T::one()
    } else {
        kb.floor()
    };
    let mut out = vec![t_a];
    let mut k = first;
    while k <= last {
        out.push(k * dt);
        k += T::one();
    }
    out.push(t_b);
    // drop slivers left by snapping
    out.dedup_by(|b, a| (*b - *a).abs() < snap * dt);
    out
}

struct Work<T> {
    q: Vec<T>,
    p: Vec<T>,
    phi: Vec<T>,
    pi: Vec<T>,
}

impl<T: Real> Work<T> {
    fn zeros(nd: usize, n: usize) -> Self {
        Work {
            q: vec![T::zero(); nd],
            p: vec![T::zero(); nd],
            phi: vec![T::zero(); n],
            pi: vec![T::zero(); n],
        }
    }

    fn load(&mut self, z: &[T]) {
        let nd = self.q.len();
        for d in 0..nd {
            self.q[d] = z[2 * d];
            self.p[d] = z[2 * d + 1];
        }
        for (i, pair) in z[2 * nd..].chunks_exact(2).enumerate() {
            self.phi[i] = pair[0];
            self.pi[i] = pair[1];
        }
    }

    fn store(&self, z: &mut [T]) {
        let nd = self.q.len();
        for d in 0..nd {
            z[2 * d] = self.q[d];
            z[2 * d + 1] = self.p[d];
        }
        for (i, pair) in z[2 * nd..].chunks_exact_mut(2).enumerate() {
            pair[0] = self.phi[i];
            pair[1] = self.pi[i];
        }
    }

    fn axpy_from(&mut self, base: &Work<T>, a: T, k: &Work<T>) {
        for (dst, (b, v)) in [
            (&mut self.q, (&base.q, &k.q)),
            (&mut self.p, (&base.p, &k.p)),
            (&mut self.phi, (&base.phi, &k.phi)),
            (&mut self.pi, (&base.pi, &k.pi)),
        ] {
            for i in 0..dst.len() {
                dst[i] = b[i] + a * v[i];
            }
        }
    }
}

impl<T: Real> QuadraticHamiltonian<T> {
    fn plan(&self, t_a: T, t_b: T, dt: T, scheme: Scheme) -> Vec<Step<T>> {
        let b = step_boundaries(t_a, t_b, dt);
        let half = T::lit(0.5);
        b.windows(2)
            .map(|w| {
                let h = w[1] - w[0];
                let lapses = match scheme {
                    Scheme::Splitting => vec![self.lapses(w[0] + half * h)],
                    Scheme::Rk4 => vec![self.lapses(w[0]), self.lapses(w[0] + half * h), self.lapses(w[1])],
                };
                Step { h, lapses }
            })
            .collect()
    }

    /// `pi -= a K Phi`, `P -= b_d omega_d^2 Q`.
    fn kick(&self, w: &mut Work<T>, a: T, b: &[T]) {
        let n = w.phi.len();
        let g = &self.inv_bonds;
        let mut left = T::zero();
        for i in 0..n {
            let right = if i + 1 < n { w.phi[i + 1] } else { T::zero() };
            let f = g[i] * (w.phi[i] - left) + g[i + 1] * (w.phi[i] - right);
            left = w.phi[i];
            w.pi[i] -= a * f;
        }
        for (d, c) in self.couplings.iter().enumerate() {
            w.p[d] -= b[d] * c.omega * c.omega * w.q[d];
        }
    }

    fn drift(&self, w: &mut Work<T>, a: T) {
        for (phi, (pi, ic)) in w.phi.iter_mut().zip(w.pi.iter().zip(&self.inv_cells)) {
            *phi += a * *pi * *ic;
        }
    }

    fn couple(&self, w: &mut Work<T>, h: T, lapse: &[T]) {
        for (d, c) in self.couplings.iter().enumerate() {
            let v = lapse[d] * (w.p[d] - c.lambda * w.phi[c.site]);
            w.q[d] += h * v;
            w.pi[c.site] += h * c.lambda * v;
        }
    }

    fn run_splitting(&self, w: &mut Work<T>, steps: &[Step<T>]) {
        if steps.is_empty() {
            return;
        }
        let half = T::lit(0.5);
        let scaled = |s: &Step<T>, f: T| -> Vec<T> { s.lapses[0].iter().map(|&l| l * s.h * f).collect() };
        self.kick(w, half * steps[0].h, &scaled(&steps[0], half));
        for (k, s) in steps.iter().enumerate() {
            self.drift(w, half * s.h);
            self.couple(w, s.h, &s.lapses[0]);
            self.drift(w, half * s.h);
            match steps.get(k + 1) {
                Some(next) => {
                    let b: Vec<T> = scaled(s, half)
                        .iter()
                        .zip(scaled(next, half))
                        .map(|(a, b)| *a + b)
                        .collect();
                    self.kick(w, half * (s.h + next.h), &b);
                }
                None => self.kick(w, half * s.h, &scaled(s, half)),
            }
        }
    }

    fn rhs(&self, w: &Work<T>, lapse: &[T], out: &mut Work<T>) {
        let n = w.phi.len();
        let g = &self.inv_bonds;
        for i in 0..n {
            out.phi[i] = w.pi[i] * self.inv_cells[i];
            let l = if i > 0 { w.phi[i - 1] } else { T::zero() };
            let r = if i + 1 < n { w.phi[i + 1] } else { T::zero() };
            out.pi[i] = -(g[i] * (w.phi[i] - l) + g[i + 1] * (w.phi[i] - r));
        }
        for (d, c) in self.couplings.iter().enumerate() {
            let v = lapse[d] * (w.p[d] - c.lambda * w.phi[c.site]);
            out.q[d] = v;
            out.p[d] = -lapse[d] * c.omega * c.omega * w.q[d];
            out.pi[c.site] += c.lambda * v;
        }
    }

    fn run_rk4(&self, w: &mut Work<T>, steps: &[Step<T>]) {
        let (nd, n) = (w.q.len(), w.phi.len());
        let mut k: Vec<Work<T>> = (0..4).map(|_| Work::zeros(nd, n)).collect();
        let mut tmp = Work::zeros(nd, n);
        let (half, two, sixth) = (T::lit(0.5), T::lit(2.0), T::one() / T::lit(6.0));
        for s in steps {
            let h = s.h;
            self.rhs(w, &s.lapses[0], &mut k[0]);
            tmp.axpy_from(w, half * h, &k[0]);
            self.rhs(&tmp, &s.lapses[1], &mut k[1]);
            tmp.axpy_from(w, half * h, &k[1]);
            self.rhs(&tmp, &s.lapses[1], &mut k[2]);
            tmp.axpy_from(w, h, &k[2]);
            self.rhs(&tmp, &s.lapses[2], &mut k[3]);
            for (dst, parts) in [
                (&mut w.q, [&k[0].q, &k[1].q, &k[2].q, &k[3].q]),
                (&mut w.p, [&k[0].p, &k[1].p, &k[2].p, &k[3].p]),
                (&mut w.phi, [&k[0].phi, &k[1].phi, &k[2].phi, &k[3].phi]),
                (&mut w.pi, [&k[0].pi, &k[1].pi, &k[2].pi, &k[3].pi]),
            ] {
                for i in 0..dst.len() {
                    dst[i] += h * sixth * (parts[0][i] + two * (parts[1][i] + parts[2][i]) + parts[3][i]);
                }
            }
        }
    }

    fn check_stability(&self, dt: T, scheme: Scheme, t_a: T, t_b: T) -> Result<()> {
        let limit = match scheme {
            Scheme::Splitting => T::lit(2.0),
            Scheme::Rk4 => T::lit(8.0).sqrt(),
        };
        for s in [t_a, (t_a + t_b) / T::lit(2.0), t_b] {
            let product = dt * self.omega_max(s);
            if product >= limit {
                return Err(Error::Cfl {
                    dt: dt.as_f64(),
                    product: product.as_f64(),
                });
            }
        }
        Ok(())
    }

    pub fn time_step(&self, opts: &IntegratorOptions) -> T {
        self.dx * T::lit(opts.dt_factor)
    }

    /// Evolves the columns of `block` (phase-space vectors at `t_a`) to `t_b`.
    pub fn evolve_columns(&self, block: &mut DMatrix<T>, t_a: T, t_b: T, opts: &IntegratorOptions) -> Result<()> {
        if t_b < t_a {
            return Err(Error::Scenario(
                "backward integration is not supported; invert the propagator".into(),
            ));
        }
        if block.nrows() != self.layout.dim() {
            return Err(Error::Layout("column length does not match the layout".into()));
        }
        let dt = self.time_step(opts);
        self.check_stability(dt, opts.scheme, t_a, t_b)?;
        let steps = self.plan(t_a, t_b, dt, opts.scheme);
        let (nd, n) = (self.layout.n_detectors, self.layout.n_sites);
        let dim = self.layout.dim();
        block.as_mut_slice().par_chunks_mut(dim).for_each_init(
            || Work::zeros(nd, n),
            |w, col| {
                w.load(col);
                match opts.scheme {
                    Scheme::Splitting => self.run_splitting(w, &steps),
                    Scheme::Rk4 => self.run_rk4(w, &steps),
                }
                w.store(col);
            },
        );
        Ok(())
    }

    /// Columns of `block` sampled after every step of `[t_a, t_b]`; the
    /// callback receives the time and the evolved block.
    pub fn trace_columns(
        &self,
        block: &mut DMatrix<T>,
        t_a: T,
        t_b: T,
        opts: &IntegratorOptions,
        mut visit: impl FnMut(T, &DMatrix<T>),
    ) -> Result<()> {
        let dt = self.time_step(opts);
        let bounds = step_boundaries(t_a, t_b, dt);
        for w in bounds.windows(2) {
            self.evolve_columns(block, w[0], w[1], opts)?;
            visit(w[1], block);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Propagator<T> {
    pub frame: Frame,
    pub t_a: T,
    pub t_b: T,
    pub s: DMatrix<T>,
    /// `||S^T J S - J||_inf` if it was computed.
    pub defect: Option<T>,
}

impl<T: Real> Propagator<T> {
    pub fn identity(frame: Frame, dim: usize, t: T) -> Self {
        Propagator {
            frame,
            t_a: t,
            t_b: t,
            s: DMatrix::identity(dim, dim),
            defect: Some(T::zero()),
        }
    }

    pub fn symplectic_defect(&self) -> T {
        linalg::symplectic_defect(&self.s)
    }

    /// Maps states at `t_b` back to `t_a`.
    pub fn inverse(&self) -> Self {
        Propagator {
            frame: self.frame,
            t_a: self.t_b,
            t_b: self.t_a,
            s: linalg::symplectic_inverse(&self.s),
            defect: self.defect,
        }
    }

    /// `self` after `first`.
    pub fn after(&self, first: &Propagator<T>) -> Result<Self> {
        if self.frame != first.frame || (self.t_a - first.t_b).abs() > T::lit(1e-12) {
            return Err(Error::TimeMismatch {
                state: first.t_b.as_f64(),
                requested: self.t_a.as_f64(),
            });
        }
        Ok(Propagator {
            frame: self.frame,
            t_a: first.t_a,
            t_b: self.t_b,
            s: &self.s * &first.s,
            defect: None,
        })
    }
}

pub fn integrate_propagator<T: Real>(
    h: &QuadraticHamiltonian<T>,
    t_a: T,
    t_b: T,
    opts: &IntegratorOptions,
) -> Result<Propagator<T>> {
    let dim = h.layout.dim();
    let mut s = DMatrix::identity(dim, dim);
    h.evolve_columns(&mut s, t_a, t_b, opts)?;
    let defect = match opts.symplectic_tol {
        Some(tol) => {
            let d = linalg::symplectic_defect(&s);
            if !(d.as_f64() <= tol) {
                return Err(Error::SymplecticDefect {
                    defect: d.as_f64(),
                    tol,
                });
            }
            Some(d)
        }
        None => None,
    };
    Ok(Propagator {
        frame: h.frame,
        t_a,
        t_b,
        s,
        defect,
    })
}

/// `Sigma -> S Sigma S^T`.
pub fn evolve<T: Real>(state: &CovarianceState<T>, prop: &Propagator<T>) -> Result<CovarianceState<T>> {
    if state.frame != prop.frame {
        return Err(Error::FrameMismatch {
            expected: prop.frame.to_string(),
            found: state.frame.to_string(),
        });
    }
    if (state.time - prop.t_a).abs() > T::lit(1e-12) {
        return Err(Error::TimeMismatch {
            state: state.time.as_f64(),
            requested: prop.t_a.as_f64(),
        });
    }
    let mut sigma = &prop.s * &state.sigma * prop.s.transpose();
    linalg::symmetrize(&mut sigma);
    CovarianceState::new(state.layout, state.frame, prop.t_b, sigma)
}

/// `|| S(t_b, t_a) - S(t_b, t_m) S(t_m, t_a) ||_inf`.
pub fn huygens_check<T: Real>(
    h: &QuadraticHamiltonian<T>,
    t_a: T,
    t_m: T,
    t_b: T,
    opts: &IntegratorOptions,
) -> Result<T> {
    let direct = integrate_propagator(h, t_a, t_b, opts)?;
    let first = integrate_propagator(h, t_a, t_m, opts)?;
    let second = integrate_propagator(h, t_m, t_b, opts)?;
    let composed = second.after(&first)?;
    Ok(linalg::max_abs(&(&direct.s - &composed.s)))
}

/// Closed-form detector response of a single oscillator radiating into an
/// infinite line: `Q'' + 2 gamma Q' + omega^2 Q = 0` with `gamma = lambda^2/4`.
/// Returns the `(Q, P)` rows against the initial `(Q, P)` columns at proper
/// time `tau`, with `P = Q' + (lambda^2/2)(Q - Q(0))`.
pub fn detector_mode_oracle(omega: f64, lambda: f64, tau: f64) -> [[f64; 2]; 2] {
    let g = lambda * lambda / 4.0;
    let wr = (omega * omega - g * g).sqrt();
    let e = (-g * tau).exp();
    let (s, c) = (wr * tau).sin_cos();
    let phi = e * (c + g / wr * s);
    let dphi = -e * (omega * omega / wr) * s;
    let f = e * s / wr;
    let df = e * (c - g / wr * s);
    [[phi, f], [dphi + 2.0 * g * (phi - 1.0), df + 2.0 * g * f]]
}

/// Largest deviation of detector `d`'s lattice mode functions from
/// [`detector_mode_oracle`] over `[0, t_end]`, relative to the largest oracle
/// entry. The field starts empty, so the comparison holds until the first
/// wall echo returns.
pub fn detector_oracle_error<T: Real>(
    h: &QuadraticHamiltonian<T>,
    d: usize,
    t_end: T,
    opts: &IntegratorOptions,
) -> Result<f64> {
    let l = h.layout;
    let c = &h.couplings[d];
    let echo = (h.grid.half_width - c.clock.position().abs()) * T::lit(2.0);
    if t_end >= echo {
        return Err(Error::Lattice("oracle window reaches the wall echo".into()));
    }
    let (omega, lambda) = (c.omega.as_f64(), c.lambda.as_f64());
    let mut block = DMatrix::zeros(l.dim(), 2);
    block[(l.q(d), 0)] = T::one();
    block[(l.p(d), 1)] = T::one();
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    h.trace_columns(&mut block, T::zero(), t_end, opts, |s, b| {
        let o = detector_mode_oracle(omega, lambda, c.clock.proper_time(s).as_f64());
        for (r, row) in [l.q(d), l.p(d)].into_iter().enumerate() {
            for k in 0..2 {
                err = err.max((b[(row, k)].as_f64() - o[r][k]).abs());
                scale = scale.max(o[r][k].abs());
            }
        }
    })?;
    Ok(err / scale)
}

/// Size of the response of detector `to` to the initial data of detector
/// `from` before and after the light-travel time between them.
#[derive(Debug, Clone, Copy)]
pub struct DelayReport {
    pub delay: f64,
    /// Largest block entry for `t < delay - 2 dx`.
    pub max_before: f64,
    /// Largest block entry for `t >= delay`.
    pub max_after: f64,
}

pub fn retarded_delay_check<T: Real>(
    h: &QuadraticHamiltonian<T>,
    from: usize,
    to: usize,
    t_end: T,
    opts: &IntegratorOptions,
) -> Result<DelayReport> {
    if h.frame != Frame::T {
        return Err(Error::FrameMismatch {
            expected: "t".into(),
            found: h.frame.to_string(),
        });
    }
    let l = h.layout;
    let distance = (h.grid.coords[h.detector_site(from)] - h.grid.coords[h.detector_site(to)]).abs();
    let mut block = DMatrix::zeros(l.dim(), 2);
    block[(l.q(from), 0)] = T::one();
    block[(l.p(from), 1)] = T::one();
    let (mut before, mut after) = (0.0f64, 0.0f64);
    let cutoff = distance - T::lit(2.0) * h.dx;
    h.trace_columns(&mut block, T::zero(), t_end, opts, |t, b| {
        let m = [b[(l.q(to), 0)], b[(l.q(to), 1)], b[(l.p(to), 0)], b[(l.p(to), 1)]]
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs().as_f64()));
        if t < cutoff {
            before = before.max(m);
        } else if t >= distance {
            after = after.max(m);
        }
    })?;
    Ok(DelayReport {
        delay: distance.as_f64(),
        max_before: before,
        max_after: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::assemble_initial_state;
    use crate::lattice::FieldKernel;
    use std::f64::consts::PI;

    fn det(name: &str, x: f64, lambda: f64) -> Detector<f64> {
        Detector {
            name: name.into(),
            omega: 1.0,
            lambda,
            position: x,
        }
    }

    fn ham(frame: Frame, per_pi: f64, dets: &[Detector<f64>]) -> QuadraticHamiltonian<f64> {
        let l = LatticeSpec::build(2.0 * PI, PI / per_pi).unwrap();
        build_hamiltonian(frame, &l, dets, &Chart::new(0.5).unwrap()).unwrap()
    }

    #[test]
    fn hamiltonian_structure() {
        let hd = ham(Frame::Eta, 4.0, &[det("A", 0.0, 0.4)]);
        let m = hd.matrix(0.3);
        assert_eq!(m, m.transpose());
        let free = ham(Frame::Eta, 4.0, &[det("A", 0.0, 0.0)]).matrix(0.3);
        let l = hd.layout;
        for i in 0..l.n_sites {
            assert_eq!(free[(l.q(0), l.phi(i))], 0.0);
            assert_eq!(free[(l.p(0), l.phi(i))], 0.0);
        }
        // the field block is positive definite
        let idx = l.field_rows();
        let k = DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])]);
        assert!(nalgebra::Cholesky::new(k).is_some());
        // A = 0 makes the frames identical
        let l2 = LatticeSpec::build(2.0 * PI, PI / 4.0).unwrap();
        let c0 = Chart::new(0.0).unwrap();
        let d = [det("A", 0.0, 0.4)];
        let ht = build_hamiltonian(Frame::T, &l2, &d, &c0).unwrap();
        let he = build_hamiltonian(Frame::Eta, &l2, &d, &c0).unwrap();
        assert_eq!(ht.matrix(1.0), he.matrix(1.0));
        assert!(build_hamiltonian(Frame::T, &l2, &[det("A", 0.1, 0.4)], &c0).is_err());
    }

    #[test]
    fn splitting_matches_rk4_on_smooth_data() {
        let h = ham(Frame::Eta, 16.0, &[det("A", 0.0, 0.4), det("B", -PI, 0.4)]);
        let dim = h.layout.dim();
        let x = h.grid.x_initial.clone();
        let mut z = DMatrix::zeros(dim, 1);
        z[(0, 0)] = 1.0;
        for i in 0..h.layout.n_sites {
            z[(h.layout.phi(i), 0)] = (-(x[i] + 1.0).powi(2)).exp();
        }
        let opts = |scheme, dt_factor| IntegratorOptions {
            dt_factor,
            scheme,
            symplectic_tol: None,
        };
        let run = |o: IntegratorOptions| {
            let mut a = z.clone();
            h.evolve_columns(&mut a, 0.0, 1.3, &o).unwrap();
            a
        };
        let reference = run(opts(Scheme::Rk4, 0.05));
        let coarse = (run(opts(Scheme::Splitting, 0.1)) - &reference).abs().max();
        let fine = (run(opts(Scheme::Splitting, 0.05)) - &reference).abs().max();
        // second order
        assert!(coarse / fine > 3.5 && coarse / fine < 4.5, "{coarse} {fine}");
        assert!(fine < 2e-4);
    }

    #[test]
    fn splitting_is_symplectic_rk4_is_not() {
        let h = ham(Frame::T, 32.0, &[det("A", 0.0, 0.4)]);
        let opts = IntegratorOptions::default();
        let s = integrate_propagator(&h, 0.0, PI, &opts).unwrap();
        assert!(s.defect.unwrap() < 1e-10);
        let rk = IntegratorOptions {
            scheme: Scheme::Rk4,
            ..opts
        };
        match integrate_propagator(&h, 0.0, PI, &rk) {
            Err(Error::SymplecticDefect { defect, .. }) => assert!(defect > 1e-3),
            other => panic!("expected a symplectic defect error, got {other:?}"),
        }
    }

    #[test]
    fn unstable_step_rejected() {
        let h = ham(Frame::Eta, 16.0, &[det("A", 0.0, 0.4)]);
        let opts = IntegratorOptions {
            dt_factor: 0.9,
            ..Default::default()
        };
        assert!(matches!(
            integrate_propagator(&h, 0.0, 1.0, &opts),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn grid_anchoring() {
        let dt = 0.1;
        let b = step_boundaries(0.05f64, 0.43, dt);
        assert_eq!(b.len(), 6);
        assert!((b[1] - 0.1).abs() < 1e-15 && (b[4] - 0.4).abs() < 1e-15);
        let c = step_boundaries(0.0, 0.3, dt);
        assert_eq!(c.len(), 4);
        let h = ham(Frame::Eta, 8.0, &[det("A", 0.0, 0.4)]);
        let opts = IntegratorOptions::default();
        let d = huygens_check(&h, 0.0, 10.0 * h.time_step(&opts), PI, &opts).unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn pulse_splits_into_movers() {
        let g = |y: f64| (-(y / 0.4).powi(2)).exp();
        let err = |per_pi: f64, dt_factor: f64| {
            let h = ham(Frame::T, per_pi, &[]);
            let l = h.layout;
            let x = h.grid.coords.clone();
            let mut z = DMatrix::zeros(l.dim(), 1);
            for i in 0..l.n_sites {
                z[(l.phi(i), 0)] = g(x[i]);
            }
            let t = PI / 2.0;
            let opts = IntegratorOptions {
                dt_factor,
                scheme: Scheme::Splitting,
                symplectic_tol: None,
            };
            h.evolve_columns(&mut z, 0.0, t, &opts).unwrap();
            (0..l.n_sites)
                .map(|i| (z[(l.phi(i), 0)] - 0.5 * (g(x[i] - t) + g(x[i] + t))).abs())
                .fold(0.0, f64::max)
        };
        // at unit Courant number the lattice propagates grid data exactly
        assert!(err(32.0, 1.0) < 1e-12);
        let (c, f) = (err(32.0, 0.5), err(64.0, 0.5));
        assert!(c / f > 3.5 && c / f < 4.5, "{c} {f}");
    }

    #[test]
    fn free_vacuum_is_stationary() {
        let l = LatticeSpec::build(2.0 * PI, PI / 8.0).unwrap();
        let chart = Chart::new(0.5).unwrap();
        let d = [det("A", 0.0, 0.0)];
        let h = build_hamiltonian(Frame::T, &l, &d, &chart).unwrap();
        let grid = FieldGrid::for_frame(&l, Frame::T, &chart);
        let s0 = assemble_initial_state(&grid, &d, &FieldKernel::lattice_vacuum(&l), &chart).unwrap();
        let opts = IntegratorOptions {
            dt_factor: 0.02,
            ..Default::default()
        };
        let p = integrate_propagator(&h, 0.0, 1.0, &opts).unwrap();
        let s1 = evolve(&s0, &p).unwrap();
        assert!((&s1.sigma - &s0.sigma).abs().max() < 1e-3);
        assert!((h.energy(&s1) - h.energy(&s0)).abs() < 1e-4 * h.energy(&s0));
    }

    #[test]
    fn evolution_preserves_spectrum() {
        let l = LatticeSpec::build(2.0 * PI, PI / 8.0).unwrap();
        let chart = Chart::new(0.5).unwrap();
        let d = [det("A", 0.0, 0.4), det("B", -PI, 0.3)];
        let h = build_hamiltonian(Frame::Eta, &l, &d, &chart).unwrap();
        let grid = FieldGrid::for_frame(&l, Frame::Eta, &chart);
        let mut s0 =
            assemble_initial_state(&grid, &d, &FieldKernel::box_vacuum(l.half_width, l.n_sites), &chart).unwrap();
        s0.sigma *= 1.5;
        let p = integrate_propagator(&h, 0.0, 2.0, &IntegratorOptions::default()).unwrap();
        let s1 = evolve(&s0, &p).unwrap();
        let a = s0.symplectic_spectrum().unwrap();
        let b = s1.symplectic_spectrum().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
        let back = evolve(&s1, &p.inverse()).unwrap();
        assert!((&back.sigma - &s0.sigma).abs().max() < 1e-9);
        assert!(evolve(&s0, &p.inverse()).is_err());
    }

    #[test]
    fn oracle_matches_direct_ode() {
        // independent RK4 of Q'' + 2 gamma Q' + Q = 0
        let (w, lam) = (1.0, 0.4);
        let g = lam * lam / 4.0;
        let (mut q, mut v) = (1.0f64, 0.0f64);
        let n = 20000;
        let h = PI / n as f64;
        let f = |q: f64, v: f64| (v, -2.0 * g * v - w * w * q);
        for _ in 0..n {
            let k1 = f(q, v);
            let k2 = f(q + 0.5 * h * k1.0, v + 0.5 * h * k1.1);
            let k3 = f(q + 0.5 * h * k2.0, v + 0.5 * h * k2.1);
            let k4 = f(q + h * k3.0, v + h * k3.1);
            q += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        let o = detector_mode_oracle(w, lam, PI);
        assert!((o[0][0] - q).abs() < 1e-10);
        assert!((o[1][0] - (v + 2.0 * g * (q - 1.0))).abs() < 1e-10);
        let start = detector_mode_oracle(w, lam, 0.0);
        assert_eq!(start, [[1.0, 0.0], [0.0, 1.0]]);
    }
}
