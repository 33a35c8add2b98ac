//! The two slicings and the map between them.
//!
//! The alternate chart is
//!
//! ```text
//! eta = t - A sin t cos x,    xi = x - A sin x cos t,    0 <= A < 1,
//! ```
//!
//! a conformal map of the Minkowski strip, with metric
//! `ds^2 = Omega (-d eta^2 + d xi^2)`. Static worldlines at `sin x = 0` stay
//! static in the new chart and the two families of slices coincide at
//! `t = eta = n pi`.

use std::fmt;

use nalgebra::Matrix2;

use crate::{Error, Real, Result};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-13;

/// Which slicing a state or Hamiltonian refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frame {
    /// Inertial coordinates `(t, x)`.
    T,
    /// Conformal coordinates `(eta, xi)`.
    Eta,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::T => "t",
            Frame::Eta => "eta",
        }
    }

    pub fn parse(s: &str) -> Option<Frame> {
        match s {
            "t" | "T" => Some(Frame::T),
            "eta" | "Eta" | "ETA" => Some(Frame::Eta),
            _ => None,
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chart<T> {
    a: T,
}

impl<T: Real> Chart<T> {
    pub fn new(a: T) -> Result<Self> {
        if !(a >= T::zero() && a < T::one()) {
            return Err(Error::InvalidAmplitude(a.as_f64()));
        }
        Ok(Chart { a })
    }

    pub fn amplitude(&self) -> T {
        self.a
    }

    /// `(t, x) -> (eta, xi)`.
    pub fn to_alt(&self, t: T, x: T) -> (T, T) {
        let a = self.a;
        (t - a * t.sin() * x.cos(), x - a * x.sin() * t.cos())
    }

    /// Inverse map by damped Newton iteration started at `(eta, xi)`.
    pub fn from_alt(&self, eta: T, xi: T) -> Result<(T, T)> {
        let tol = T::solve_tol(NEWTON_TOL);
        let residual = |t: T, x: T| {
            let (e, s) = self.to_alt(t, x);
            (e - eta, s - xi)
        };
        let (mut t, mut x) = (eta, xi);
        let (mut r0, mut r1) = residual(t, x);
        let mut norm = r0.abs().max(r1.abs());
        for _ in 0..NEWTON_MAX_ITER {
            if norm <= tol {
                return Ok((t, x));
            }
            let j = self.jacobian(t, x);
            let det = j.determinant();
            if det.abs() < T::default_epsilon() {
                return Err(Error::SingularJacobian(t.as_f64(), x.as_f64()));
            }
            let dt = (j[(1, 1)] * r0 - j[(0, 1)] * r1) / det;
            let dx = (j[(0, 0)] * r1 - j[(1, 0)] * r0) / det;
            let mut step = T::one();
            loop {
                let (nt, nx) = (t - step * dt, x - step * dx);
                let (n0, n1) = residual(nt, nx);
                let nn = n0.abs().max(n1.abs());
                if nn < norm || step < T::lit(1e-4) {
                    t = nt;
                    x = nx;
                    r0 = n0;
                    r1 = n1;
                    norm = nn;
                    break;
                }
                step *= T::lit(0.5);
            }
        }
        if norm <= tol {
            Ok((t, x))
        } else {
            Err(Error::NewtonDiverged {
                iterations: NEWTON_MAX_ITER,
                residual: norm.as_f64(),
            })
        }
    }

    /// Metric factor `Omega(t, x)`; the Jacobian determinant is `1 / Omega`.
    pub fn conformal_factor(&self, t: T, x: T) -> T {
        let a = self.a;
        let inv = T::one() - (a + a) * t.cos() * x.cos() + a * a * (t + x).cos() * (t - x).cos();
        T::one() / inv
    }

    /// `d(eta, xi) / d(t, x)`.
    pub fn jacobian(&self, t: T, x: T) -> Matrix2<T> {
        let a = self.a;
        let (st, ct) = t.sin_cos();
        let (sx, cx) = x.sin_cos();
        Matrix2::new(T::one() - a * ct * cx, a * st * sx, a * sx * st, T::one() - a * cx * ct)
    }

    /// Equal-time slice `t = eta = n pi`, on which `xi` is a function of `x`
    /// alone.
    pub fn overlap_slice(&self, n: i32) -> OverlapSlice<T> {
        let sign = if n.rem_euclid(2) == 0 { T::one() } else { -T::one() };
        OverlapSlice {
            n,
            coeff: self.a * sign,
        }
    }

    /// Proper-time clock of a static detector at position `x_d`, expressed in
    /// the coordinate time of `frame`.
    pub fn worldline_clock(&self, x_d: T, frame: Frame) -> Result<WorldlineClock<T>> {
        let cos_xd = match frame {
            Frame::T => T::one(),
            Frame::Eta => {
                if x_d.sin().abs() > T::solve_tol(1e-12) {
                    return Err(Error::UnsupportedWorldline(x_d.as_f64()));
                }
                x_d.cos().signum()
            }
        };
        Ok(WorldlineClock {
            frame,
            coeff: match frame {
                Frame::T => T::zero(),
                Frame::Eta => self.a * cos_xd,
            },
            x_d,
        })
    }
}

/// The slice `t = eta = n pi` viewed as the map `x -> xi = x - A cos(n pi) sin x`.
#[derive(Debug, Clone, Copy)]
pub struct OverlapSlice<T> {
    pub n: i32,
    coeff: T,
}

impl<T: Real> OverlapSlice<T> {
    pub fn time(&self) -> T {
        T::lit(self.n as f64) * T::pi()
    }

    pub fn xi_of_x(&self, x: T) -> T {
        x - self.coeff * x.sin()
    }

    /// `d xi / d x` along the slice.
    pub fn dxi_dx(&self, x: T) -> T {
        T::one() - self.coeff * x.cos()
    }

    /// Inverse of [`Self::xi_of_x`]; monotone, so Newton from `x = xi` converges.
    pub fn x_of_xi(&self, xi: T) -> Result<T> {
        let tol = T::solve_tol(NEWTON_TOL);
        let mut x = xi;
        for _ in 0..NEWTON_MAX_ITER {
            let r = self.xi_of_x(x) - xi;
            if r.abs() <= tol {
                return Ok(x);
            }
            x -= r / self.dxi_dx(x);
        }
        let r = (self.xi_of_x(x) - xi).abs();
        if r <= tol {
            Ok(x)
        } else {
            Err(Error::NewtonDiverged {
                iterations: NEWTON_MAX_ITER,
                residual: r.as_f64(),
            })
        }
    }
}

/// Relation between a static detector's proper time and a frame's coordinate
/// time. In the eta frame `eta = tau - c sin tau` with `c = A cos x_d`.
#[derive(Debug, Clone, Copy)]
pub struct WorldlineClock<T> {
    frame: Frame,
    coeff: T,
    x_d: T,
}

impl<T: Real> WorldlineClock<T> {
    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn position(&self) -> T {
        self.x_d
    }

    pub fn coord_time(&self, tau: T) -> T {
        tau - self.coeff * tau.sin()
    }

    pub fn proper_time(&self, coord: T) -> T {
        if self.coeff == T::zero() {
            return coord;
        }
        let tol = T::solve_tol(NEWTON_TOL);
        let mut tau = coord;
        for _ in 0..NEWTON_MAX_ITER {
            let r = self.coord_time(tau) - coord;
            if r.abs() <= tol {
                break;
            }
            tau -= r / (T::one() - self.coeff * tau.cos());
        }
        tau
    }

    /// `d tau / d coord`, i.e. the lapse multiplying the detector Hamiltonian.
    pub fn redshift(&self, coord: T) -> T {
        let tau = self.proper_time(coord);
        T::one() / (T::one() - self.coeff * tau.cos())
    }
}
