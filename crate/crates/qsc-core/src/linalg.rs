//! Dense linear-algebra helpers shared by the verification machinery: spectral and
//! weighted operator norms, a Pade matrix exponential, a Taylor exponential action
//! for vectors, inverses with condition reporting, and log-log slope fits.

use nalgebra::DMatrix;

use crate::fock::C64;
use crate::{QscError, Result};

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `|| W_row M W_col ||` with diagonal scalings given entrywise. Callers encode a
/// `p -> q` weighted operator norm by passing the `q` weights for rows and the
/// reciprocal `p` weights for columns.
pub fn weighted_spectral_norm(m: &DMatrix<C64>, row_w: &[f64], col_w: &[f64]) -> f64 {
    assert_eq!(m.nrows(), row_w.len());
    assert_eq!(m.ncols(), col_w.len());
    let mut a = m.clone();
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            a[(r, c)] *= row_w[r] * col_w[c];
        }
    }
    spectral_norm(&a)
}

pub fn select_columns(m: &DMatrix<C64>, cols: &[u32]) -> DMatrix<C64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, j| m[(r, cols[j] as usize)])
}

pub fn select_rows(m: &DMatrix<C64>, rows: &[u32]) -> DMatrix<C64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, c| m[(rows[i] as usize, c)])
}

fn inf_norm(m: &DMatrix<C64>) -> f64 {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling-and-squaring with a [6/6] Pade approximant; the
/// coefficients come straight from the factorial formula for diagonal Pade tables.
pub fn expm(a: &DMatrix<C64>) -> DMatrix<C64> {
    assert_eq!(a.nrows(), a.ncols());
    let n = a.nrows();
    let nrm = inf_norm(a);
    let s = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as u32 } else { 0 };
    let a = a * C64::new(0.5f64.powi(s as i32), 0.0);

    // b_j = (2m-j)! m! / ((2m)! j! (m-j)!), m = 6
    let m = 6usize;
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let b: Vec<f64> = (0..=m)
        .map(|j| fact(2 * m - j) * fact(m) / (fact(2 * m) * fact(j) * fact(m - j)))
        .collect();

    let id = DMatrix::<C64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let even = &a6 * C64::new(b[6], 0.0)
        + &a4 * C64::new(b[4], 0.0)
        + &a2 * C64::new(b[2], 0.0)
        + &id * C64::new(b[0], 0.0);
    let odd = &a
        * (&a4 * C64::new(b[5], 0.0) + &a2 * C64::new(b[3], 0.0) + &id * C64::new(b[1], 0.0));
    let num = &even + &odd;
    let den = &even - &odd;
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Pade denominator is invertible for the scaled matrix");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// `e^X v` by the Taylor series, with `X` supplied as a matrix-vector action.
/// Converges for any bounded `X`; iteration stops once the running term falls
/// below `1e-17` of the accumulated result (checked twice to ride out the
/// pre-asymptotic growth of the terms).
pub fn expm_apply<F>(apply: F, v: &[C64]) -> Vec<C64>
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    let mut acc = v.to_vec();
    let mut term = v.to_vec();
    let mut small_streak = 0;
    for k in 1..=500u32 {
        term = apply(&term);
        let inv = 1.0 / f64::from(k);
        for t in term.iter_mut() {
            *t *= inv;
        }
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += t;
        }
        let tn = term.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let an = acc.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if tn <= 1e-17 * an.max(1.0) {
            small_streak += 1;
            if small_streak >= 2 {
                break;
            }
        } else {
            small_streak = 0;
        }
    }
    acc
}

/// Inverse together with the SVD condition number (sigma_max / sigma_min).
pub fn inverse_with_condition(m: &DMatrix<C64>) -> Result<(DMatrix<C64>, f64)> {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| QscError::Validation("matrix inversion failed: singular factor".into()))?;
    if smin <= 0.0 {
        return Err(QscError::Validation("matrix inversion failed: zero singular value".into()));
    }
    Ok((inv, smax / smin))
}

/// `max |M - M^H|` entrywise.
pub fn hermitian_residual(m: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

/// Smallest eigenvalue of the Hermitian part `(M + M^H)/2`.
pub fn min_eig_hermitian(m: &DMatrix<C64>) -> f64 {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(h);
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Least-squares slope of `ln y` against `ln x`; measures convergence order.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-300).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn expm_diagonal_oracle() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            c(0.3, 1.2),
            c(-2.0, 0.0),
            c(0.0, -3.5),
        ]));
        let e = expm(&d);
        for i in 0..3 {
            assert!((e[(i, i)] - d[(i, i)].exp()).norm() < 1e-13);
        }
        assert!(e[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn expm_nilpotent_oracle() {
        let mut n = DMatrix::<C64>::zeros(2, 2);
        n[(0, 1)] = c(1.0, 0.0);
        let e = expm(&n);
        assert!((e[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((e[(0, 1)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!(e[(1, 0)].norm() < 1e-15);
    }

    #[test]
    fn expm_of_antihermitian_is_unitary() {
        let mut x = DMatrix::<C64>::zeros(4, 4);
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for r in 0..4 {
            for cc in 0..4 {
                x[(r, cc)] = c(next(), next());
            }
        }
        let a = (&x - x.adjoint()) * c(0.5, 0.0);
        let u = expm(&a);
        let res = &u * u.adjoint() - DMatrix::<C64>::identity(4, 4);
        assert!(max_abs(&res) < 1e-12);
    }

    #[test]
    fn expm_apply_matches_dense() {
        let mut m = DMatrix::<C64>::zeros(6, 6);
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for r in 0..6 {
            for cc in 0..6 {
                m[(r, cc)] = c(next(), next());
            }
        }
        let v: Vec<C64> = (0..6).map(|_| c(next(), next())).collect();
        let dense = expm(&m) * nalgebra::DVector::from_vec(v.clone());
        let taylor = expm_apply(
            |x| {
                let xv = nalgebra::DVector::from_vec(x.to_vec());
                (&m * xv).iter().cloned().collect()
            },
            &v,
        );
        for i in 0..6 {
            assert!((dense[i] - taylor[i]).norm() < 1e-11);
        }
    }

    #[test]
    fn norms_and_weights() {
        let mut m = DMatrix::<C64>::zeros(2, 2);
        m[(0, 0)] = c(3.0, 0.0);
        m[(1, 1)] = c(0.0, -5.0);
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-13);
        // rank one: norm = ||u|| ||v||
        let u = nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0)]);
        let v = nalgebra::DVector::from_vec(vec![c(0.0, 3.0), c(4.0, 0.0)]);
        let r1 = &u * v.transpose();
        assert!((spectral_norm(&r1) - (5.0f64.sqrt() * 5.0)).abs() < 1e-12);
        // weighted diagonal: max over w_row * d * w_col
        let wn = weighted_spectral_norm(&m, &[2.0, 1.0], &[1.0, 0.5]);
        assert!((wn - 6.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_and_condition() {
        let mut m = DMatrix::<C64>::identity(3, 3);
        m[(2, 2)] = c(0.25, 0.0);
        let (inv, cond) = inverse_with_condition(&m).unwrap();
        assert!((inv[(2, 2)] - c(4.0, 0.0)).norm() < 1e-13);
        assert!((cond - 4.0).abs() < 1e-10);
        let z = DMatrix::<C64>::zeros(2, 2);
        assert!(inverse_with_condition(&z).is_err());
    }

    #[test]
    fn hermitian_helpers() {
        let mut h = DMatrix::<C64>::zeros(2, 2);
        h[(0, 0)] = c(2.0, 0.0);
        h[(1, 1)] = c(2.0, 0.0);
        h[(0, 1)] = c(0.0, 1.0);
        h[(1, 0)] = c(0.0, -1.0);
        assert!(hermitian_residual(&h) < 1e-15);
        assert!((min_eig_hermitian(&h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_fit_recovers_power() {
        let xs = [0.25, 0.125, 0.0625, 0.03125];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.97)).collect();
        assert!((fit_loglog_slope(&xs, &ys) - 1.97).abs() < 1e-10);
    }
}
