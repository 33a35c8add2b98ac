//! Dense helpers for the interleaved symplectic form
//! `J = diag([[0, 1], [-1, 0]], ...)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::{Error, Real, Result};

/// Above this dimension symplectic spectra are bounded by Lanczos instead of a
/// full eigendecomposition.
const DENSE_SPECTRUM_MAX: usize = 400;

#[cfg(test)]
pub fn symplectic_form<T: Real>(dim: usize) -> DMatrix<T> {
    let mut j = DMatrix::zeros(dim, dim);
    for k in (0..dim).step_by(2) {
        j[(k, k + 1)] = T::one();
        j[(k + 1, k)] = -T::one();
    }
    j
}

/// `J M` without a product: row pairs are swapped with a sign.
pub fn j_left<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for c in 0..m.ncols() {
        for k in (0..m.nrows()).step_by(2) {
            out[(k, c)] = m[(k + 1, c)];
            out[(k + 1, c)] = -m[(k, c)];
        }
    }
    out
}

pub fn j_vec<T: Real>(v: &mut DVector<T>) {
    for k in (0..v.len()).step_by(2) {
        let (a, b) = (v[k], v[k + 1]);
        v[k] = b;
        v[k + 1] = -a;
    }
}

pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
}

/// `|| S^T J S - J ||_inf` as the largest entry.
pub fn symplectic_defect<T: Real>(s: &DMatrix<T>) -> T {
    let js = j_left(s);
    let mut g = s.transpose() * js;
    for k in (0..g.nrows()).step_by(2) {
        g[(k, k + 1)] -= T::one();
        g[(k + 1, k)] += T::one();
    }
    max_abs(&g)
}

/// `S^{-1} = -J S^T J` for symplectic `S`.
pub fn symplectic_inverse<T: Real>(s: &DMatrix<T>) -> DMatrix<T> {
    let st = s.transpose();
    let jst = j_left(&st);
    // (J S^T) J = -(J (J S^T)^T)^T ... apply J on the right via columns.
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for r in 0..jst.nrows() {
        for k in (0..jst.ncols()).step_by(2) {
            // (M J)[r, k] = -M[r, k+1], (M J)[r, k+1] = M[r, k]
            out[(r, k)] = jst[(r, k + 1)];
            out[(r, k + 1)] = -jst[(r, k)];
        }
    }
    out
}

pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for c in 0..n {
        for r in (c + 1)..n {
            let v = (m[(r, c)] + m[(c, r)]) * half;
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

fn cholesky<T: Real>(sigma: &DMatrix<T>) -> Result<Cholesky<T, nalgebra::Dyn>> {
    Cholesky::new(sigma.clone()).ok_or_else(|| Error::NotPositive("Cholesky factorization failed".into()))
}

/// All symplectic eigenvalues, ascending. With `Sigma = L L^T` the matrix
/// `L^T J L` is antisymmetric with eigenvalues `+-i nu_k`, so `nu_k^2` are
/// the (doubly degenerate) eigenvalues of `-(L^T J L)^2`.
pub fn symplectic_spectrum<T: Real>(sigma: &DMatrix<T>) -> Result<Vec<T>> {
    let l = cholesky(sigma)?.l();
    let b = l.transpose() * j_left(&l);
    let w = -(&b * &b);
    let mut ev: Vec<T> = SymmetricEigen::new(w)
        .eigenvalues
        .iter()
        .map(|&v| v.max(T::zero()).sqrt())
        .collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ev.into_iter().step_by(2).collect())
}

/// Smallest symplectic eigenvalue; dense for small states, otherwise via
/// Lanczos on `K^T K` with `K = L^{-1} J L^{-T}`, whose top eigenvalue is
/// `1 / nu_min^2`.
pub fn min_symplectic_eigenvalue<T: Real>(sigma: &DMatrix<T>) -> Result<T> {
    if sigma.nrows() <= DENSE_SPECTRUM_MAX {
        return Ok(symplectic_spectrum(sigma)?[0]);
    }
    let l = cholesky(sigma)?.l();
    let n = sigma.nrows();
    let apply_k = |v: &DVector<T>| -> DVector<T> {
        let mut y = l.tr_solve_lower_triangular(v).expect("nonsingular factor");
        j_vec(&mut y);
        l.solve_lower_triangular(&y).expect("nonsingular factor")
    };
    let op = |v: &DVector<T>| -> DVector<T> { -apply_k(&apply_k(v)) };
    let top = lanczos_top(n, op, 120);
    Ok(T::one() / top.sqrt())
}

/// Largest eigenvalue of a symmetric positive semidefinite operator.
fn lanczos_top<T: Real>(n: usize, op: impl Fn(&DVector<T>) -> DVector<T>, max_iter: usize) -> T {
    // deterministic start with no special symmetry
    let mut v = DVector::from_fn(n, |i, _| T::lit(1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0));
    v /= v.norm();
    let mut basis: Vec<DVector<T>> = vec![v.clone()];
    let mut alphas: Vec<T> = Vec::new();
    let mut betas: Vec<T> = Vec::new();
    let mut last = T::zero();
    for it in 0..max_iter.min(n) {
        let mut w = op(&basis[it]);
        let a = w.dot(&basis[it]);
        alphas.push(a);
        for b in &basis {
            let c = w.dot(b);
            w.axpy(-c, b, T::one());
        }
        for b in &basis {
            let c = w.dot(b);
            w.axpy(-c, b, T::one());
        }
        let beta = w.norm();
        let k = alphas.len();
        let tri = DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                alphas[r]
            } else if r + 1 == c {
                betas[r]
            } else if c + 1 == r {
                betas[c]
            } else {
                T::zero()
            }
        });
        let eig = SymmetricEigen::new(tri);
        let (imax, top) =
            eig.eigenvalues.iter().enumerate().fold(
                (0, T::min_value().unwrap()),
                |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc },
            );
        let resid = (beta * eig.eigenvectors[(k - 1, imax)]).abs();
        if resid <= T::solve_tol(1e-13) * top.abs() || beta <= T::default_epsilon() * top.abs() {
            return top;
        }
        if it > 0 && (top - last).abs() <= T::solve_tol(1e-15) * top.abs() && resid <= T::lit(1e-8) * top {
            return top;
        }
        last = top;
        betas.push(beta);
        basis.push(w / beta);
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_symplectic(n_pairs: usize, seed: u64) -> DMatrix<f64> {
        // product of shears and local squeezes, all symplectic
        let dim = 2 * n_pairs;
        let mut s = DMatrix::<f64>::identity(dim, dim);
        let mut x = seed as f64 + 0.5;
        let mut rnd = || {
            x = (x * 9301.0 + 49297.0) % 233280.0;
            x / 233280.0 - 0.5
        };
        for _ in 0..4 {
            // symmetric shear [[1, 0], [A, 1]] on (q, p) blocks
            let mut a = DMatrix::<f64>::zeros(n_pairs, n_pairs);
            for i in 0..n_pairs {
                for j in 0..=i {
                    let v = rnd();
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            let mut m = DMatrix::<f64>::identity(dim, dim);
            for i in 0..n_pairs {
                for j in 0..n_pairs {
                    m[(2 * i + 1, 2 * j)] += a[(i, j)];
                }
            }
            s = m * s;
            let mut d = DMatrix::<f64>::identity(dim, dim);
            for i in 0..n_pairs {
                let r = (2.0 * rnd()).exp();
                d[(2 * i, 2 * i)] = r;
                d[(2 * i + 1, 2 * i + 1)] = 1.0 / r;
            }
            s = d * s;
        }
        s
    }

    #[test]
    fn inverse_and_defect() {
        let s = random_symplectic(5, 3);
        assert!(symplectic_defect(&s) < 1e-10);
        let inv = symplectic_inverse(&s);
        let id = &inv * &s;
        assert!((id - DMatrix::identity(10, 10)).abs().max() < 1e-9);
        let j = symplectic_form::<f64>(10);
        assert_eq!(j_left(&s), &j * &s);
    }

    #[test]
    fn spectrum_is_symplectic_invariant() {
        let s = random_symplectic(6, 11);
        let mut sigma = DMatrix::<f64>::zeros(12, 12);
        for k in 0..6 {
            let nu = 0.5 + 0.3 * k as f64;
            sigma[(2 * k, 2 * k)] = nu;
            sigma[(2 * k + 1, 2 * k + 1)] = nu;
        }
        let evolved = &s * &sigma * s.transpose();
        let spec = symplectic_spectrum(&evolved).unwrap();
        for (k, v) in spec.iter().enumerate() {
            assert!((v - (0.5 + 0.3 * k as f64)).abs() < 1e-8, "{spec:?}");
        }
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let n_pairs = 210;
        let s = random_symplectic(n_pairs, 5);
        let mut sigma = DMatrix::<f64>::zeros(2 * n_pairs, 2 * n_pairs);
        for k in 0..n_pairs {
            let nu = 0.55 + 0.01 * k as f64;
            sigma[(2 * k, 2 * k)] = nu;
            sigma[(2 * k + 1, 2 * k + 1)] = nu;
        }
        let evolved = &s * &sigma * s.transpose();
        let dense = symplectic_spectrum(&evolved).unwrap()[0];
        assert!((dense - 0.55).abs() < 1e-8);
        let l = cholesky(&evolved).unwrap().l();
        let n = evolved.nrows();
        let apply_k = |v: &DVector<f64>| {
            let mut y = l.tr_solve_lower_triangular(v).unwrap();
            j_vec(&mut y);
            l.solve_lower_triangular(&y).unwrap()
        };
        let top = lanczos_top(n, |v| -apply_k(&apply_k(v)), 200);
        assert!((1.0 / top.sqrt() - 0.55).abs() < 1e-8, "{}", 1.0 / top.sqrt());
    }
}
