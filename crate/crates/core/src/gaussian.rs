//! Zero-mean Gaussian states of detectors plus lattice field.
//!
//! Phase-space coordinates are interleaved pairs,
//! `(Q_1, P_1, ..., Q_D, P_D, Phi_1, pi_1, ..., Phi_n, pi_n)`, and a state is
//! its symmetrized covariance `Sigma_ab = <{z_a, z_b}>/2` (units with
//! `hbar = 1`). The uncertainty relation reads `Sigma + (i/2) J >= 0`, i.e.
//! every symplectic eigenvalue is at least `1/2`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::geometry::{Chart, Frame};
use crate::lattice::{FieldGrid, FieldKernel};
use crate::linalg;
use crate::{Error, Real, Result};

/// Slack allowed below `1/2` when checking symplectic eigenvalues.
pub const UNCERTAINTY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub name: String,
    pub omega: T,
    pub lambda: T,
    /// Position `x_d` in the inertial frame.
    pub position: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSpaceLayout {
    pub n_detectors: usize,
    pub n_sites: usize,
}

impl PhaseSpaceLayout {
    pub fn new(n_detectors: usize, n_sites: usize) -> Self {
        PhaseSpaceLayout { n_detectors, n_sites }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_detectors + self.n_sites
    }

    pub fn dim(&self) -> usize {
        2 * self.n_pairs()
    }

    pub fn q(&self, d: usize) -> usize {
        debug_assert!(d < self.n_detectors);
        2 * d
    }

    pub fn p(&self, d: usize) -> usize {
        2 * d + 1
    }

    pub fn phi(&self, i: usize) -> usize {
        debug_assert!(i < self.n_sites);
        2 * (self.n_detectors + i)
    }

    pub fn pi(&self, i: usize) -> usize {
        2 * (self.n_detectors + i) + 1
    }

    pub fn field_rows(&self) -> Vec<usize> {
        (0..self.n_sites).map(|i| self.phi(i)).collect()
    }
}

/// A linear phase-space functional `sum_k c_k z_k`.
#[derive(Debug, Clone)]
pub struct Observable<T> {
    pub label: String,
    pub coeffs: Vec<(usize, T)>,
}

impl<T: Real> Observable<T> {
    pub fn coordinate(label: impl Into<String>, index: usize) -> Self {
        Observable {
            label: label.into(),
            coeffs: vec![(index, T::one())],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceState<T> {
    pub layout: PhaseSpaceLayout,
    pub frame: Frame,
    pub time: T,
    pub sigma: DMatrix<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct Validity<T> {
    pub asymmetry: T,
    pub min_symplectic: T,
}

impl<T: Real> CovarianceState<T> {
    pub fn new(layout: PhaseSpaceLayout, frame: Frame, time: T, sigma: DMatrix<T>) -> Result<Self> {
        if sigma.nrows() != layout.dim() || sigma.ncols() != layout.dim() {
            return Err(Error::Layout(format!(
                "covariance is {}x{}, layout needs {}",
                sigma.nrows(),
                sigma.ncols(),
                layout.dim()
            )));
        }
        Ok(CovarianceState {
            layout,
            frame,
            time,
            sigma,
        })
    }

    /// Symmetry residual and smallest symplectic eigenvalue; errors if the
    /// uncertainty relation fails.
    pub fn validate(&self) -> Result<Validity<T>> {
        let asym = linalg::max_abs(&(&self.sigma - self.sigma.transpose()));
        let scale = linalg::max_abs(&self.sigma).max(T::one());
        if asym > T::solve_tol(1e-10) * scale {
            return Err(Error::NotPositive(format!(
                "asymmetric covariance ({:e})",
                asym.as_f64()
            )));
        }
        let nu = linalg::min_symplectic_eigenvalue(&self.sigma)?;
        if nu < T::lit(0.5) - T::solve_tol(UNCERTAINTY_SLACK) {
            return Err(Error::Uncertainty(nu.as_f64()));
        }
        Ok(Validity {
            asymmetry: asym,
            min_symplectic: nu,
        })
    }

    pub fn symplectic_spectrum(&self) -> Result<Vec<T>> {
        linalg::symplectic_spectrum(&self.sigma)
    }

    /// Covariance of the listed phase-space indices.
    pub fn block(&self, idx: &[usize]) -> DMatrix<T> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.sigma[(idx[r], idx[c])])
    }

    /// Reduced state of a set of detectors, `(Q, P)` pairs in the given order.
    pub fn marginal(&self, detectors: &[usize]) -> DMatrix<T> {
        let idx: Vec<usize> = detectors
            .iter()
            .flat_map(|&d| [self.layout.q(d), self.layout.p(d)])
            .collect();
        self.block(&idx)
    }

    pub fn detector_block(&self, d: usize) -> DMatrix<T> {
        self.marginal(&[d])
    }

    /// `<O_a O_b>` for the given functionals.
    pub fn correlators(&self, obs: &[Observable<T>]) -> DMatrix<T> {
        let o = observable_matrix(obs, self.layout.dim());
        let mut c = &o * &self.sigma * o.transpose();
        linalg::symmetrize(&mut c);
        c
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# frame={} time={} detectors={} sites={}",
            self.frame,
            self.time.as_f64(),
            self.layout.n_detectors,
            self.layout.n_sites
        )?;
        let mut line = String::new();
        for r in 0..self.sigma.nrows() {
            line.clear();
            for c in 0..self.sigma.ncols() {
                if c > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{}", self.sigma[(r, c)].as_f64());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Io("empty covariance file".into()))??;
        let field = |key: &str| -> Result<String> {
            header
                .trim_start_matches('#')
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| Error::Io(format!("header lacks '{key}'")))
        };
        let bad = |what: &str| Error::Io(format!("bad {what} in covariance header"));
        let frame = Frame::parse(&field("frame")?).ok_or_else(|| bad("frame"))?;
        let time: f64 = field("time")?.parse().map_err(|_| bad("time"))?;
        let nd: usize = field("detectors")?.parse().map_err(|_| bad("detectors"))?;
        let ns: usize = field("sites")?.parse().map_err(|_| bad("sites"))?;
        let layout = PhaseSpaceLayout::new(nd, ns);
        let dim = layout.dim();
        let mut data = Vec::with_capacity(dim * dim);
        for line in lines {
            let line = line?;
            for v in line.split(',') {
                let x: f64 = v.trim().parse().map_err(|_| Error::Io(format!("bad entry '{v}'")))?;
                data.push(T::lit(x));
            }
        }
        if data.len() != dim * dim {
            return Err(Error::Io(format!(
                "expected {} entries, found {}",
                dim * dim,
                data.len()
            )));
        }
        CovarianceState::new(layout, frame, T::lit(time), DMatrix::from_row_slice(dim, dim, &data))
    }
}

pub fn observable_matrix<T: Real>(obs: &[Observable<T>], dim: usize) -> DMatrix<T> {
    let mut o = DMatrix::zeros(obs.len(), dim);
    for (r, ob) in obs.iter().enumerate() {
        for &(k, c) in &ob.coeffs {
            o[(r, k)] += c;
        }
    }
    o
}

/// `<O_a O_b>` for the given functionals.
pub fn smeared_correlator_matrix<T: Real>(state: &CovarianceState<T>, obs: &[Observable<T>]) -> DMatrix<T> {
    state.correlators(obs)
}

/// Detector ground states times the field state `kernel`, expressed on the
/// `t = 0` slice of `grid`'s frame. In the eta frame the kernel is pulled back
/// through the slice map: `Phi'(xi) = Phi(x(xi))`, `Pi'(xi) = Pi(x(xi)) dx/dxi`.
pub fn assemble_initial_state<T: Real>(
    grid: &FieldGrid<T>,
    detectors: &[Detector<T>],
    kernel: &FieldKernel<T>,
    chart: &Chart<T>,
) -> Result<CovarianceState<T>> {
    if (kernel.half_width - grid.half_width).abs() > T::solve_tol(1e-12) * grid.half_width {
        return Err(Error::Layout("kernel and grid describe different boxes".into()));
    }
    let layout = PhaseSpaceLayout::new(detectors.len(), grid.n_sites());
    let s0 = chart.overlap_slice(0);
    let (points, dx_dc) = grid.physical_positions(&s0)?;
    let weights: Vec<T> = (0..grid.n_sites()).map(|i| grid.cells[i] * dx_dc[i]).collect();
    let (pp, qq, pq) = kernel.sample(&points, &weights);
    for (name, m) in [("field", &pp), ("momentum", &qq)] {
        if nalgebra::Cholesky::new(m.clone()).is_none() {
            return Err(Error::NotPositive(format!("sampled {name} kernel")));
        }
    }
    let mut sigma = DMatrix::zeros(layout.dim(), layout.dim());
    for (d, det) in detectors.iter().enumerate() {
        if !(det.omega > T::zero()) {
            return Err(Error::Layout(format!("detector {} needs omega > 0", det.name)));
        }
        sigma[(layout.q(d), layout.q(d))] = T::one() / (T::lit(2.0) * det.omega);
        sigma[(layout.p(d), layout.p(d))] = det.omega / T::lit(2.0);
    }
    let n = grid.n_sites();
    for i in 0..n {
        for j in 0..n {
            sigma[(layout.phi(i), layout.phi(j))] = pp[(i, j)];
            sigma[(layout.pi(i), layout.pi(j))] = qq[(i, j)];
            sigma[(layout.phi(i), layout.pi(j))] = pq[(i, j)];
            sigma[(layout.pi(j), layout.phi(i))] = pq[(i, j)];
        }
    }
    CovarianceState::new(layout, grid.frame, T::zero(), sigma)
}

/// Covariance with the given `(Q, P)` blocks on the diagonal.
pub fn product_state<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let dim: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut s = DMatrix::zeros(dim, dim);
    let mut o = 0;
    for b in blocks {
        s.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    s
}

pub fn as_vector<T: Real>(v: &[T]) -> DVector<T> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeSpec;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn setup(frame: Frame) -> CovarianceState<f64> {
        let l = LatticeSpec::build(2.0 * PI, PI / 4.0).unwrap();
        let chart = Chart::new(0.5).unwrap();
        let grid = FieldGrid::for_frame(&l, frame, &chart);
        let det = Detector {
            name: "A".into(),
            omega: 1.3,
            lambda: 0.4,
            position: 0.0,
        };
        let kernel = FieldKernel::lattice_vacuum(&l);
        assemble_initial_state(&grid, &[det], &kernel, &chart).unwrap()
    }

    #[test]
    fn layout_indices() {
        let l = PhaseSpaceLayout::new(2, 5);
        assert_eq!(l.dim(), 14);
        assert_eq!((l.q(1), l.p(1), l.phi(0), l.pi(4)), (2, 3, 4, 13));
    }

    #[test]
    fn initial_state_is_pure_and_frame_independent() {
        let t = setup(Frame::T);
        let e = setup(Frame::Eta);
        assert!((&t.sigma - &e.sigma).abs().max() < 1e-12);
        for nu in t.symplectic_spectrum().unwrap() {
            assert!((nu - 0.5).abs() < 1e-9);
        }
        let det = t.detector_block(0);
        assert!((det[(0, 0)] - 1.0 / 2.6).abs() < 1e-15 && (det[(1, 1)] - 0.65).abs() < 1e-15);
        assert_eq!(e.frame, Frame::Eta);
    }

    #[test]
    fn scaled_state_fails_validation() {
        let mut s = setup(Frame::T);
        assert!(s.validate().is_ok());
        s.sigma *= 0.9;
        assert!(matches!(s.validate(), Err(Error::Uncertainty(_))));
    }

    #[test]
    fn correlators_of_coordinates_are_entries() {
        let s = setup(Frame::T);
        let obs = [
            Observable::coordinate("Q", 0),
            Observable::coordinate("phi3", s.layout.phi(3)),
        ];
        let c = smeared_correlator_matrix(&s, &obs);
        assert_eq!(c[(0, 1)], s.sigma[(0, s.layout.phi(3))]);
        assert_eq!(c[(1, 1)], s.sigma[(s.layout.phi(3), s.layout.phi(3))]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn csv_round_trip(scale in 0.5f64..3.0, time in 0.0f64..3.0) {
            let mut s = setup(Frame::Eta);
            s.sigma *= scale;
            s.time = time;
            let mut buf = Vec::new();
            s.write_csv(&mut buf).unwrap();
            let back = CovarianceState::<f64>::read_csv(std::io::Cursor::new(buf)).unwrap();
            prop_assert_eq!(back.layout, s.layout);
            prop_assert_eq!(back.frame, s.frame);
            prop_assert_eq!(back.time, s.time);
            prop_assert_eq!(back.sigma, s.sigma);
        }
    }
}
