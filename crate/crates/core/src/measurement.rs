//! Projective Gaussian collapse of one detector on a time slice.
//!
//! Measuring detector `d` with gain `g` replaces its `(Q, P)` block by the
//! pure state `diag(g/2, 1/(2g))`, removes its correlations with everything
//! else, and corrects the remaining covariance by `I/J`:
//!
//! ```text
//! l    = g/2      + <P^2>_pre        lb = 1/(2g) + <Q^2>_pre
//! J    = l lb - <QP>_pre^2
//! I_xy = -( <xQ><yQ> l + <xP><yP> lb - <QP>(<xQ><yP> + <xP><yQ>) )
//! ```
//!
//! Algebraically this is Schur-complement conditioning on a meter with
//! covariance `diag(1/(2g), g/2)`, i.e. with the roles of the two quadratures
//! swapped relative to the prepared state.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;

use crate::gaussian::{CovarianceState, PhaseSpaceLayout};
use crate::geometry::Frame;
use crate::linalg;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSpec<T> {
    pub detector: usize,
    pub g: T,
    pub frame: Frame,
    /// Slice time in `frame`'s coordinate.
    pub time: T,
}

/// The two readings of the meter covariance in terms of the gain `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterConvention {
    /// `diag(g/2, 1/(2g))`, the same as the prepared post-measurement state.
    Prepared,
    /// `diag(1/(2g), g/2)`.
    Swapped,
}

impl MeterConvention {
    pub fn name(self) -> &'static str {
        match self {
            MeterConvention::Prepared => "diag(g/2, 1/(2g))",
            MeterConvention::Swapped => "diag(1/(2g), g/2)",
        }
    }
}

pub fn meter_covariance<T: Real>(g: T, convention: MeterConvention) -> Matrix2<T> {
    let two = T::lit(2.0);
    match convention {
        MeterConvention::Prepared => Matrix2::new(g / two, T::zero(), T::zero(), T::one() / (two * g)),
        MeterConvention::Swapped => Matrix2::new(T::one() / (two * g), T::zero(), T::zero(), g / two),
    }
}

/// Detector state right after a measurement with gain `g`.
pub fn post_measurement_block<T: Real>(g: T) -> Matrix2<T> {
    meter_covariance(g, MeterConvention::Prepared)
}

#[derive(Debug, Clone)]
pub struct CollapseLedger<T> {
    pub detector: usize,
    pub time: T,
    pub ell: T,
    pub ell_bar: T,
    pub j: T,
    pub pre: Matrix2<T>,
    pub post: Matrix2<T>,
    /// Largest entry of `I/J`.
    pub correction: T,
}

fn check_slice<T: Real>(state: &CovarianceState<T>, spec: &MeasurementSpec<T>) -> Result<()> {
    if state.frame != spec.frame {
        return Err(Error::FrameMismatch {
            expected: spec.frame.to_string(),
            found: state.frame.to_string(),
        });
    }
    if (state.time - spec.time).abs() > T::lit(1e-12) {
        return Err(Error::TimeMismatch {
            state: state.time.as_f64(),
            requested: spec.time.as_f64(),
        });
    }
    if spec.detector >= state.layout.n_detectors {
        return Err(Error::Measurement(format!("no detector {}", spec.detector)));
    }
    if !(spec.g > T::zero()) {
        return Err(Error::Measurement("gain must be positive".into()));
    }
    Ok(())
}

/// The `I/J` collapse on the state's own slice.
pub fn collapse_paper<T: Real>(
    state: &CovarianceState<T>,
    spec: &MeasurementSpec<T>,
) -> Result<(CovarianceState<T>, CollapseLedger<T>)> {
    check_slice(state, spec)?;
    let l = state.layout;
    let (a, b) = (l.q(spec.detector), l.p(spec.detector));
    let s = &state.sigma;
    let (qq, pp, qp) = (s[(a, a)], s[(b, b)], s[(a, b)]);
    let post = post_measurement_block(spec.g);
    let ell = post[(0, 0)] + pp;
    let ell_bar = post[(1, 1)] + qq;
    let j = ell * ell_bar - qp * qp;
    if !(j > T::zero()) {
        return Err(Error::Measurement("non-positive J".into()));
    }
    let dim = l.dim();
    let cq: Vec<T> = (0..dim).map(|r| s[(r, a)]).collect();
    let cp: Vec<T> = (0..dim).map(|r| s[(r, b)]).collect();
    let mut out = s.clone();
    let mut corr_max = T::zero();
    for c in 0..dim {
        if c == a || c == b {
            continue;
        }
        for r in 0..dim {
            if r == a || r == b {
                continue;
            }
            let i = -(cq[r] * cq[c] * ell + cp[r] * cp[c] * ell_bar - qp * (cq[r] * cp[c] + cp[r] * cq[c]));
            let v = i / j;
            corr_max = corr_max.max(v.abs());
            out[(r, c)] += v;
        }
    }
    for r in 0..dim {
        for k in [a, b] {
            out[(r, k)] = T::zero();
            out[(k, r)] = T::zero();
        }
    }
    out[(a, a)] = post[(0, 0)];
    out[(b, b)] = post[(1, 1)];
    let ledger = CollapseLedger {
        detector: spec.detector,
        time: spec.time,
        ell,
        ell_bar,
        j,
        pre: Matrix2::new(qq, qp, qp, pp),
        post,
        correction: corr_max,
    };
    Ok((CovarianceState::new(l, state.frame, state.time, out)?, ledger))
}

/// Textbook Gaussian conditioning: `Sigma_rest - C (Sigma_d + M)^{-1} C^T`
/// for meter covariance `M`, then the detector is re-prepared in `prepared`.
pub fn collapse_schur_oracle<T: Real>(
    state: &CovarianceState<T>,
    detector: usize,
    meter: &Matrix2<T>,
    prepared: &Matrix2<T>,
) -> Result<CovarianceState<T>> {
    let l = state.layout;
    let (a, b) = (l.q(detector), l.p(detector));
    let rest: Vec<usize> = (0..l.dim()).filter(|&k| k != a && k != b).collect();
    let sd = state.block(&[a, b]);
    let m = DMatrix::from_fn(2, 2, |r, c| meter[(r, c)]);
    let inv = (sd + m)
        .try_inverse()
        .ok_or_else(|| Error::Measurement("singular conditioning block".into()))?;
    let c = DMatrix::from_fn(rest.len(), 2, |r, k| state.sigma[(rest[r], [a, b][k])]);
    let cond = state.block(&rest) - &c * inv * c.transpose();
    let mut out = DMatrix::zeros(l.dim(), l.dim());
    for (r, &rr) in rest.iter().enumerate() {
        for (k, &cc) in rest.iter().enumerate() {
            out[(rr, cc)] = cond[(r, k)];
        }
    }
    out[(a, a)] = prepared[(0, 0)];
    out[(a, b)] = prepared[(0, 1)];
    out[(b, a)] = prepared[(1, 0)];
    out[(b, b)] = prepared[(1, 1)];
    CovarianceState::new(l, state.frame, state.time, out)
}

pub fn reduced_detector_state<T: Real>(state: &CovarianceState<T>, detectors: &[usize]) -> DMatrix<T> {
    state.marginal(detectors)
}

/// Density of the phase-space outcomes `y = (q_1, p_1, ...)` when each listed
/// detector is read out with the given meter covariance: a zero-mean normal
/// density with covariance `reduced + diag(meters)`.
pub fn outcome_density<T: Real>(reduced: &DMatrix<T>, meters: &[Matrix2<T>], y: &[T]) -> Result<T> {
    let k = meters.len();
    if reduced.nrows() != 2 * k || y.len() != 2 * k {
        return Err(Error::Measurement("outcome dimension mismatch".into()));
    }
    let mut c = reduced.clone();
    for (d, m) in meters.iter().enumerate() {
        for r in 0..2 {
            for s in 0..2 {
                c[(2 * d + r, 2 * d + s)] += m[(r, s)];
            }
        }
    }
    let chol = nalgebra::Cholesky::new(c).ok_or_else(|| Error::NotPositive("outcome covariance".into()))?;
    let v = DVector::from_column_slice(y);
    let quad = v.dot(&chol.solve(&v));
    let det = chol.determinant();
    let norm = (T::two_pi()).powi(k as i32) * det.sqrt();
    Ok((-quad / T::lit(2.0)).exp() / norm)
}

/// A random symplectic matrix on `n_pairs` interleaved pairs: alternating
/// symmetric shears, local squeezes and local rotations.
pub fn random_symplectic<R: Rng>(n_pairs: usize, rng: &mut R) -> DMatrix<f64> {
    let dim = 2 * n_pairs;
    let mut s = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..3 {
        let mut shear = DMatrix::<f64>::identity(dim, dim);
        for i in 0..n_pairs {
            for j in 0..=i {
                let v = rng.random_range(-0.8..0.8);
                shear[(2 * i + 1, 2 * j)] += v;
                if i != j {
                    shear[(2 * j + 1, 2 * i)] += v;
                }
            }
        }
        let mut local = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n_pairs {
            let r: f64 = rng.random_range(-0.7f64..0.7).exp();
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (sn, cs) = th.sin_cos();
            local[(2 * i, 2 * i)] = r * cs;
            local[(2 * i, 2 * i + 1)] = r * sn;
            local[(2 * i + 1, 2 * i)] = -sn / r;
            local[(2 * i + 1, 2 * i + 1)] = cs / r;
        }
        s = local * shear * s;
    }
    s
}

/// A random valid state with detectors first: `S diag(nu) S^T` with
/// symplectic eigenvalues `nu >= 1/2`.
pub fn random_state<R: Rng>(n_detectors: usize, n_sites: usize, rng: &mut R) -> CovarianceState<f64> {
    let layout = PhaseSpaceLayout::new(n_detectors, n_sites);
    let s = random_symplectic(layout.n_pairs(), rng);
    let mut d = DMatrix::<f64>::zeros(layout.dim(), layout.dim());
    for k in 0..layout.n_pairs() {
        let nu = 0.5 + rng.random_range(0.0..1.5) * rng.random_range(0.0f64..1.0).powi(2);
        d[(2 * k, 2 * k)] = nu;
        d[(2 * k + 1, 2 * k + 1)] = nu;
    }
    let mut sigma = &s * d * s.transpose();
    linalg::symmetrize(&mut sigma);
    CovarianceState::new(layout, Frame::T, 0.0, sigma).expect("consistent layout")
}

#[derive(Debug, Clone, Copy)]
pub struct MeterResolution {
    pub convention: MeterConvention,
    /// Largest deviation of the conditioned block from the `I/J` update, per
    /// candidate convention.
    pub deviation_prepared: f64,
    pub deviation_swapped: f64,
}

/// Compares the `I/J` update against Schur conditioning under both meter
/// conventions on random states and reports which one it reproduces.
pub fn resolve_meter_convention<R: Rng>(trials: usize, n_pairs: usize, rng: &mut R) -> Result<MeterResolution> {
    let (mut dev_p, mut dev_s) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let state = random_state(2, n_pairs - 2, rng);
        let g = rng.random_range(-1.0f64..1.0).exp();
        let spec = MeasurementSpec {
            detector: rng.random_range(0..2),
            g,
            frame: Frame::T,
            time: 0.0,
        };
        let (paper, _) = collapse_paper(&state, &spec)?;
        let post = post_measurement_block(g);
        for (conv, dev) in [
            (MeterConvention::Prepared, &mut dev_p),
            (MeterConvention::Swapped, &mut dev_s),
        ] {
            let oracle = collapse_schur_oracle(&state, spec.detector, &meter_covariance(g, conv), &post)?;
            *dev = dev.max(linalg::max_abs(&(&paper.sigma - &oracle.sigma)));
        }
    }
    Ok(MeterResolution {
        convention: if dev_s <= dev_p {
            MeterConvention::Swapped
        } else {
            MeterConvention::Prepared
        },
        deviation_prepared: dev_p,
        deviation_swapped: dev_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(d: usize, g: f64) -> MeasurementSpec<f64> {
        MeasurementSpec {
            detector: d,
            g,
            frame: Frame::T,
            time: 0.0,
        }
    }

    #[test]
    fn post_block_and_cross_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = random_state(2, 3, &mut rng);
            let g = rng.random_range(0.3..3.0);
            let (post, ledger) = collapse_paper(&s, &spec(1, g)).unwrap();
            let b = post.detector_block(1);
            assert_eq!(b[(0, 0)], g / 2.0);
            assert_eq!(b[(1, 1)], 1.0 / (2.0 * g));
            assert_eq!(b[(0, 1)], 0.0);
            for r in 0..post.layout.dim() {
                if r != 2 && r != 3 {
                    assert!(post.sigma[(r, 2)].abs() <= 1e-14 && post.sigma[(3, r)].abs() <= 1e-14);
                }
            }
            assert!(ledger.j > 0.0);
            post.validate().unwrap();
        }
    }

    #[test]
    fn swapped_meter_reproduces_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = resolve_meter_convention(200, 4, &mut rng).unwrap();
        assert_eq!(r.convention, MeterConvention::Swapped);
        assert!(r.deviation_swapped < 1e-10);
        assert!(r.deviation_prepared > 1e-3);
    }

    #[test]
    fn unit_gain_conventions_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(1, 3, &mut rng);
        let (paper, _) = collapse_paper(&s, &spec(0, 1.0)).unwrap();
        let post = post_measurement_block(1.0);
        for conv in [MeterConvention::Prepared, MeterConvention::Swapped] {
            let o = collapse_schur_oracle(&s, 0, &meter_covariance(1.0, conv), &post).unwrap();
            assert!((&o.sigma - &paper.sigma).abs().max() < 1e-12);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn update_is_swapped_meter_conditioning(seed in 0u64..u64::MAX, ln_g in -2.0f64..2.0, d in 0usize..2) {
            let s = random_state(2, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            let g = ln_g.exp();
            let (paper, _) = collapse_paper(&s, &spec(d, g)).unwrap();
            let meter = meter_covariance(g, MeterConvention::Swapped);
            let o = collapse_schur_oracle(&s, d, &meter, &post_measurement_block(g)).unwrap();
            let scale = s.sigma.abs().max().max(1.0);
            proptest::prop_assert!((&o.sigma - &paper.sigma).abs().max() < 1e-10 * scale);
            proptest::prop_assert!(paper.validate().is_ok());
        }
    }

    #[test]
    fn collapse_checks_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_state(1, 2, &mut rng);
        let mut bad = spec(0, 1.0);
        bad.time = 0.5;
        assert!(matches!(collapse_paper(&s, &bad), Err(Error::TimeMismatch { .. })));
        bad = spec(0, 1.0);
        bad.frame = Frame::Eta;
        assert!(matches!(collapse_paper(&s, &bad), Err(Error::FrameMismatch { .. })));
        assert!(collapse_paper(&s, &spec(3, 1.0)).is_err());
        assert!(collapse_paper(&s, &spec(0, 0.0)).is_err());
    }

    #[test]
    fn uncorrelated_detector_is_untouched_elsewhere() {
        // collapsing a detector with no correlations leaves the rest alone
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_state(1, 3, &mut rng);
        let mut sigma = DMatrix::zeros(10, 10);
        sigma[(0, 0)] = 0.7;
        sigma[(1, 1)] = 0.9;
        sigma.view_mut((2, 2), (8, 8)).copy_from(&base.sigma);
        let s = CovarianceState::new(PhaseSpaceLayout::new(2, 3), Frame::T, 0.0, sigma).unwrap();
        let (post, _) = collapse_paper(&s, &spec(0, 2.0)).unwrap();
        assert_eq!(post.sigma.view((2, 2), (8, 8)), s.sigma.view((2, 2), (8, 8)));
    }

    #[test]
    fn product_outcomes_factorize() {
        let a = DMatrix::<f64>::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.5]);
        let b = DMatrix::<f64>::from_row_slice(2, 2, &[0.6, -0.2, -0.2, 0.9]);
        let joint = crate::gaussian::product_state(&[a.clone(), b.clone()]);
        let m = [
            meter_covariance(1.5, MeterConvention::Swapped),
            meter_covariance(0.7, MeterConvention::Swapped),
        ];
        let y = [0.3, -0.4, 1.1, 0.2];
        let pj = outcome_density(&joint, &m, &y).unwrap();
        let pa = outcome_density(&a, &m[..1], &y[..2]).unwrap();
        let pb = outcome_density(&b, &m[1..], &y[2..]).unwrap();
        assert!((pj - pa * pb).abs() < 1e-10 * pj);
        // normalization by a crude quadrature of one pair
        let mut total = 0.0;
        let h = 0.05;
        for i in -120..=120 {
            for j in -120..=120 {
                total += outcome_density(&a, &m[..1], &[i as f64 * h, j as f64 * h]).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }
}
