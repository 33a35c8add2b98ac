//! Spatial discretization of the Dirichlet box `[-L, L]`.
//!
//! Sites sit at `x_i = -L + i dx`, `i = 1..=n`, with `dx = pi / m` so that the
//! detector positions `x = 0` and `x = -pi` are always sites. In the eta frame
//! the field lives on the image of those sites under the `t = 0` slice map,
//! `xi_i = x_i - A sin x_i`, which keeps the boundaries and detector sites
//! fixed and makes the initial state identical in both frames.

use nalgebra::DMatrix;

use crate::geometry::{Chart, Frame, OverlapSlice};
use crate::{Error, Real, Result};

/// Smallest lattice the engine will build.
pub const MIN_SITES: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec<T> {
    pub half_width: T,
    /// `L / pi`.
    pub half_width_in_pi: usize,
    /// Sites per unit of pi, so `dx = pi / per_pi`.
    pub per_pi: usize,
    pub dx: T,
    pub n_sites: usize,
}

impl<T: Real> LatticeSpec<T> {
    /// Largest spacing `pi / m <= target_dx`, refined further if needed to
    /// reach [`MIN_SITES`].
    pub fn build(half_width: T, target_dx: T) -> Result<Self> {
        let ratio = (half_width / T::pi()).as_f64();
        let n_box = ratio.round();
        if (ratio - n_box).abs() > 1e-9 || n_box < 2.0 {
            return Err(Error::Lattice(format!(
                "half-width must be an integer multiple of pi, at least 2 pi (got {ratio} pi)"
            )));
        }
        if !(target_dx > T::zero()) {
            return Err(Error::Lattice("target dx must be positive".into()));
        }
        let n_box = n_box as usize;
        let mut per_pi = (T::pi() / target_dx).as_f64().ceil().max(1.0) as usize;
        // pi/target_dx may land a hair above an integer through rounding
        if per_pi > 1 && (T::pi() / target_dx).as_f64() - (per_pi - 1) as f64 <= 1e-9 {
            per_pi -= 1;
        }
        while 2 * n_box * per_pi - 1 < MIN_SITES {
            per_pi += 1;
        }
        Ok(LatticeSpec {
            half_width: T::lit(n_box as f64) * T::pi(),
            half_width_in_pi: n_box,
            per_pi,
            dx: T::pi() / T::lit(per_pi as f64),
            n_sites: 2 * n_box * per_pi - 1,
        })
    }

    pub fn position(&self, i: usize) -> T {
        -self.half_width + T::lit((i + 1) as f64) * self.dx
    }

    pub fn positions(&self) -> Vec<T> {
        (0..self.n_sites).map(|i| self.position(i)).collect()
    }

    /// Zero-based index of the site at `x`, which must lie on the lattice.
    pub fn site_index(&self, x: T) -> Result<usize> {
        let s = ((x + self.half_width) / self.dx).as_f64();
        let k = s.round();
        if (s - k).abs() > 1e-8 || k < 1.0 || k > self.n_sites as f64 {
            return Err(Error::Lattice(format!(
                "x = {} is not an interior lattice site",
                x.as_f64()
            )));
        }
        Ok(k as usize - 1)
    }

    /// Same box at twice the resolution.
    pub fn refined(&self) -> Self {
        Self::build(self.half_width, self.dx / T::lit(2.0)).expect("refinement of a valid lattice")
    }
}

/// Field sites in the spatial coordinate of one frame, with the weights the
/// lattice Hamiltonian needs:
///
/// ```text
/// H_field = sum_i pi_i^2 / (2 c_i) + sum_bonds (Phi_{i+1} - Phi_i)^2 / (2 h_{i+1/2})
/// ```
///
/// with `Phi = 0` on the walls. `pi_i` approximates the momentum density
/// integrated over the cell.
#[derive(Debug, Clone)]
pub struct FieldGrid<T> {
    pub frame: Frame,
    /// Site coordinates (`x` or `xi`).
    pub coords: Vec<T>,
    /// Physical `x` of each site on the `t = 0` slice.
    pub x_initial: Vec<T>,
    pub cells: Vec<T>,
    /// `n + 1` bond lengths including the two wall bonds.
    pub bonds: Vec<T>,
    pub half_width: T,
}

impl<T: Real> FieldGrid<T> {
    pub fn for_frame(lattice: &LatticeSpec<T>, frame: Frame, chart: &Chart<T>) -> Self {
        let x = lattice.positions();
        let (coords, cells) = match frame {
            Frame::T => (x.clone(), vec![lattice.dx; lattice.n_sites]),
            Frame::Eta => {
                let s = chart.overlap_slice(0);
                (
                    x.iter().map(|&x| s.xi_of_x(x)).collect(),
                    x.iter().map(|&x| s.dxi_dx(x) * lattice.dx).collect(),
                )
            }
        };
        let l = lattice.half_width;
        let mut bonds = Vec::with_capacity(coords.len() + 1);
        let mut prev = -l;
        for &c in &coords {
            bonds.push(c - prev);
            prev = c;
        }
        bonds.push(l - prev);
        FieldGrid {
            frame,
            coords,
            x_initial: x,
            cells,
            bonds,
            half_width: l,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn min_spacing(&self) -> T {
        self.bonds
            .iter()
            .copied()
            .fold(T::max_value().unwrap(), |a, b| a.min(b))
    }

    /// Index of the site whose coordinate is `c`.
    pub fn site_at(&self, c: T) -> Result<usize> {
        let tol = self.min_spacing() * T::lit(1e-6);
        self.coords
            .iter()
            .position(|&s| (s - c).abs() <= tol)
            .ok_or_else(|| Error::Lattice(format!("no site at coordinate {}", c.as_f64())))
    }

    /// Physical positions of the sites on the overlap slice `s`, and
    /// `dx / d(coord)` there.
    pub fn physical_positions(&self, s: &OverlapSlice<T>) -> Result<(Vec<T>, Vec<T>)> {
        match self.frame {
            Frame::T => Ok((self.coords.clone(), vec![T::one(); self.n_sites()])),
            Frame::Eta => {
                let mut xs = Vec::with_capacity(self.n_sites());
                let mut dx_dc = Vec::with_capacity(self.n_sites());
                for &c in &self.coords {
                    let x = s.x_of_xi(c)?;
                    xs.push(x);
                    dx_dc.push(T::one() / s.dxi_dx(x));
                }
                Ok((xs, dx_dc))
            }
        }
    }
}

/// Mode-sum two-point kernels of a Gaussian field state in the box, built on
/// the Dirichlet modes `u_n(x) = sin(k_n (x + L)) / sqrt(L)`, `k_n = n pi / 2L`.
#[derive(Debug, Clone)]
pub struct FieldKernel<T> {
    pub half_width: T,
    /// `(k_n, <phi phi>_n, <pi pi>_n, <phi pi>_n)` coefficients.
    modes: Vec<[T; 4]>,
}

impl<T: Real> FieldKernel<T> {
    fn from_dispersion(half_width: T, n_modes: usize, omega: impl Fn(T) -> T, squeeze: T) -> Self {
        let two = T::lit(2.0);
        let e2r = (two * squeeze).exp();
        let modes = (1..=n_modes)
            .map(|n| {
                let k = T::lit(n as f64) * T::pi() / (two * half_width);
                let w = omega(k);
                [k, e2r / (two * w), w / (two * e2r), T::zero()]
            })
            .collect();
        FieldKernel { half_width, modes }
    }

    /// Continuum vacuum of the box, `omega_n = k_n`, truncated at `n_modes`.
    pub fn box_vacuum(half_width: T, n_modes: usize) -> Self {
        Self::from_dispersion(half_width, n_modes, |k| k, T::zero())
    }

    /// Every box mode squeezed by `r` (field quadrature stretched by `e^r`).
    pub fn squeezed(half_width: T, n_modes: usize, r: T) -> Self {
        Self::from_dispersion(half_width, n_modes, |k| k, r)
    }

    /// Ground state of the uniform lattice Hamiltonian,
    /// `omega_n = (2/dx) sin(k_n dx / 2)`.
    pub fn lattice_vacuum(lattice: &LatticeSpec<T>) -> Self {
        let two = T::lit(2.0);
        let dx = lattice.dx;
        Self::from_dispersion(
            lattice.half_width,
            lattice.n_sites,
            |k| two / dx * (k * dx / two).sin(),
            T::zero(),
        )
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    fn mode(&self, k: T, x: T) -> T {
        (k * (x + self.half_width)).sin() / self.half_width.sqrt()
    }

    fn eval(&self, slot: usize, x: T, y: T) -> T {
        self.modes.iter().fold(T::zero(), |acc, m| {
            acc + m[slot] * self.mode(m[0], x) * self.mode(m[0], y)
        })
    }

    pub fn phi_phi(&self, x: T, y: T) -> T {
        self.eval(1, x, y)
    }

    pub fn pi_pi(&self, x: T, y: T) -> T {
        self.eval(2, x, y)
    }

    pub fn phi_pi(&self, x: T, y: T) -> T {
        self.eval(3, x, y)
    }

    /// Lattice covariance blocks `(<Phi_i Phi_j>, <pi_i pi_j>, <Phi_i pi_j>)`
    /// for field values at `points` and lattice momenta `pi_i = w_i Pi(points_i)`.
    pub fn sample(&self, points: &[T], pi_weights: &[T]) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let n = points.len();
        let m = self.modes.len();
        let u = DMatrix::from_fn(n, m, |i, j| self.mode(self.modes[j][0], points[i]));
        let scaled = |slot: usize, left: &dyn Fn(usize) -> T, right: &dyn Fn(usize) -> T| {
            let a = DMatrix::from_fn(n, m, |i, j| u[(i, j)] * self.modes[j][slot] * left(i));
            let b = DMatrix::from_fn(n, m, |i, j| u[(i, j)] * right(i));
            &a * b.transpose()
        };
        let one = |_: usize| T::one();
        let w = |i: usize| pi_weights[i];
        let pp = scaled(1, &one, &one);
        let qq = scaled(2, &w, &w);
        let pq = if self.modes.iter().all(|md| md[3] == T::zero()) {
            DMatrix::zeros(n, n)
        } else {
            scaled(3, &one, &w)
        };
        (pp, qq, pq)
    }
}

/// A Gaussian smearing profile of standard deviation `width`, cut off
/// beyond `4 width` from its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<T> {
    pub center: T,
    pub width: T,
}

/// Support of a window in units of its width.
pub const WINDOW_REACH: f64 = 4.0;

impl<T: Real> Window<T> {
    pub fn new(center: T, width: T, half_width: T) -> Result<Self> {
        if !(width > T::zero()) {
            return Err(Error::Window("width must be positive".into()));
        }
        let reach = width * T::lit(WINDOW_REACH);
        if center - reach <= -half_width || center + reach >= half_width {
            return Err(Error::Window(format!(
                "window at {} with width {} reaches outside the box",
                center.as_f64(),
                width.as_f64()
            )));
        }
        Ok(Window { center, width })
    }

    /// Unit-integral profile evaluated at `x`.
    pub fn profile(&self, x: T) -> T {
        let d = x - self.center;
        if d.abs() > self.width * T::lit(WINDOW_REACH) {
            return T::zero();
        }
        let sigma = self.width;
        let z = d / sigma;
        (-(z * z) / T::lit(2.0)).exp() / (sigma * (T::two_pi()).sqrt())
    }

    /// Coefficients `a_i` with `Phi[w] = sum_i a_i Phi_i` on the overlap slice
    /// `s`, normalized so that a constant field is returned unchanged.
    pub fn field_coeffs(&self, grid: &FieldGrid<T>, s: &OverlapSlice<T>) -> Result<Vec<T>> {
        let (xs, dx_dc) = grid.physical_positions(s)?;
        let mut a: Vec<T> = (0..grid.n_sites())
            .map(|i| self.profile(xs[i]) * dx_dc[i] * grid.cells[i])
            .collect();
        let total = a.iter().copied().fold(T::zero(), |p, q| p + q);
        for v in &mut a {
            *v /= total;
        }
        Ok(a)
    }

    /// Coefficients `b_i` with `Pi[v] = sum_i b_i pi_i`.
    pub fn momentum_coeffs(&self, grid: &FieldGrid<T>, s: &OverlapSlice<T>) -> Result<Vec<T>> {
        let (xs, _) = grid.physical_positions(s)?;
        Ok(xs.iter().map(|&x| self.profile(x)).collect())
    }
}

/// Field-window coefficients on the inertial lattice.
pub fn smeared_window<T: Real>(center: T, width: T, lattice: &LatticeSpec<T>) -> Result<Vec<T>> {
    let w = Window::new(center, width, lattice.half_width)?;
    let chart = Chart::new(T::zero())?;
    let grid = FieldGrid::for_frame(lattice, Frame::T, &chart);
    w.field_coeffs(&grid, &chart.overlap_slice(0))
}
