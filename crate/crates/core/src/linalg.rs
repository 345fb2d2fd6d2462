//! Thin wrappers over the dense kernels used by the filter.

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_inverse::invert_lower_triangular;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, Mat, MatRef, Par, Side};

pub(crate) fn par() -> Par {
    faer::get_global_parallelism()
}

/// `Aᵀ B`.
pub fn at_b(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.ncols(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a.transpose(), b, 1.0, par());
    out
}

/// `A B`.
pub fn a_b(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, par());
    out
}

/// `A v` for a plain slice `v`.
pub fn mat_vec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), v.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (o, i) in out.iter_mut().zip(0..a.nrows()) {
            *o += col[i] * vj;
        }
    }
    out
}

/// `Aᵀ v`.
pub fn mat_t_vec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), v.len());
    (0..a.ncols())
        .map(|j| {
            let col = a.col(j);
            (0..a.nrows()).map(|i| col[i] * v[i]).sum()
        })
        .collect()
}

/// Lower Cholesky factor of a symmetric matrix, or `None` if it is not
/// numerically positive definite.
pub fn cholesky_lower(m: MatRef<'_, f64>) -> Option<Mat<f64>> {
    let llt = m.llt(Side::Lower).ok()?;
    let l = llt.L().to_owned();
    let finite = (0..l.ncols()).all(|j| l[(j, j)].is_finite() && l[(j, j)] > 0.0);
    finite.then_some(l)
}

/// Inverse of a lower triangular matrix.
pub fn invert_lower(l: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(l.nrows(), l.ncols());
    invert_lower_triangular(out.as_mut(), l, par());
    out
}

/// Solve `L X = B` in place.
pub fn solve_lower_in_place(l: MatRef<'_, f64>, b: &mut Mat<f64>) {
    solve_lower_triangular_in_place(l, b.as_mut(), par());
}

/// Solve `(L Lᵀ) x = b`.
pub fn cholesky_solve(l: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    solve_lower_triangular_in_place(l, rhs.as_mut(), par());
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), rhs.as_mut(), par());
    (0..b.len()).map(|i| rhs[(i, 0)]).collect()
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(m: MatRef<'_, f64>) -> Option<(Vec<f64>, Mat<f64>)> {
    let e = m.self_adjoint_eigen(Side::Lower).ok()?;
    let s = e.S();
    let vals: Vec<f64> = (0..m.nrows()).map(|i| s[i]).collect();
    Some((vals, e.U().to_owned()))
}

/// Largest absolute entry; NaN if any entry is not finite.
pub fn max_abs(m: MatRef<'_, f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if !v.is_finite() {
                return f64::NAN;
            }
            best = best.max(v.abs());
        }
    }
    best
}

pub fn all_finite(m: MatRef<'_, f64>) -> bool {
    max_abs(m).is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Mat<f64> {
        let a = Mat::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let mut m = at_b(a.as_ref(), a.as_ref());
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        m
    }

    #[test]
    fn cholesky_roundtrip_and_solve() {
        let m = spd(9);
        let l = cholesky_lower(m.as_ref()).unwrap();
        let back = a_b(l.as_ref(), l.transpose());
        assert!((&back - &m).norm_max() < 1e-12);
        let b: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x = cholesky_solve(l.as_ref(), &b);
        let mx = mat_vec(m.as_ref(), &x);
        for (u, v) in mx.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
        let li = invert_lower(l.as_ref());
        let id = a_b(li.as_ref(), l.as_ref());
        assert!((&id - Mat::<f64>::identity(9, 9)).norm_max() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = Mat::<f64>::identity(3, 3);
        m[(2, 2)] = -1.0;
        assert!(cholesky_lower(m.as_ref()).is_none());
    }

    #[test]
    fn transpose_products() {
        let a = Mat::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        let v = [1.0, -1.0, 2.0, 0.5];
        let direct = mat_t_vec(a.as_ref(), &v);
        let via = mat_vec(a.transpose(), &v);
        assert_eq!(direct, via);
    }
}
