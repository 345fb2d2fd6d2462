//! Reference and comparison reconstructions by iterative Tikhonov.
//!
//! Solves `(AᵀA + αI) x = Aᵀy` with the conjugate residual method, which
//! keeps the normal-equation residual non-increasing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ScanSlice;
use crate::projector::{MatrixCache, SparseProjection};

#[derive(Debug, Clone, PartialEq)]
pub struct TikhonovReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖(AᵀA + αI)x − Aᵀy‖ / ‖Aᵀy‖` after every iteration, starting with
    /// the initial guess.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl TikhonovReport {
    pub fn relative_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&0.0)
    }

    /// The solution, or [`Error::NotConverged`] if the tolerance was missed.
    pub fn into_converged(self) -> Result<Vec<f64>> {
        if self.converged {
            Ok(self.x)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.relative_residual(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikhonovParams {
    /// Regularization weight; `None` scales the row-sum bound on `‖AᵀA‖`
    /// by `alpha_factor`.
    pub alpha: Option<f64>,
    pub alpha_factor: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TikhonovParams {
    fn default() -> Self {
        Self {
            alpha: None,
            alpha_factor: DEFAULT_ALPHA_FACTOR,
            max_iter: 400,
            tol: 1e-6,
        }
    }
}

impl TikhonovParams {
    pub fn alpha_for(&self, a: &SparseProjection) -> f64 {
        self.alpha.unwrap_or_else(|| self.alpha_factor * a.normal_row_sum_bound())
    }
}

/// Scale-free default weight relative to `‖AᵀA‖`. Tuned for noisy data;
/// noiseless scans resolve more detail with a smaller factor.
pub const DEFAULT_ALPHA_FACTOR: f64 = 1e-2;

/// `DEFAULT_ALPHA_FACTOR ·` the row-sum bound on `‖AᵀA‖`.
pub fn default_alpha(a: &SparseProjection) -> f64 {
    DEFAULT_ALPHA_FACTOR * a.normal_row_sum_bound()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_apply(a: &SparseProjection, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = a.adjoint(&a.forward(x)?)?;
    for (o, xi) in out.iter_mut().zip(x) {
        *o += alpha * xi;
    }
    Ok(out)
}

/// Minimize `‖Ax − y‖² + α‖x‖²` from a zero start.
///
/// Stops once the relative residual drops below `tol` or after `max_iter`
/// iterations. An unconverged result is still returned, with a warning.
pub fn tikhonov_cgls(a: &SparseProjection, y: &[f64], alpha: f64, max_iter: usize, tol: f64) -> Result<TikhonovReport> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("Tikhonov weight must be positive, got {alpha}")));
    }
    let b = a.adjoint(y)?;
    let n = b.len();
    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(TikhonovReport {
            x,
            iterations: 0,
            residual_history: vec![0.0],
            converged: true,
        });
    }
    let mut r = b;
    let mut p = r.clone();
    let mut mr = normal_apply(a, alpha, &r)?;
    let mut mp = mr.clone();
    let mut rmr = dot(&r, &mr);
    let mut history = vec![1.0];
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        let step = rmr / dot(&mp, &mp);
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * mp[i];
        }
        it += 1;
        let rel = dot(&r, &r).sqrt() / b_norm;
        history.push(rel);
        if rel < tol {
            converged = true;
            break;
        }
        mr = normal_apply(a, alpha, &r)?;
        let rmr_next = dot(&r, &mr);
        let beta = rmr_next / rmr;
        rmr = rmr_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            mp[i] = mr[i] + beta * mp[i];
        }
    }
    if !converged {
        log::warn!(
            "Tikhonov solve stopped after {it} iterations at relative residual {:.3e}",
            history.last().unwrap()
        );
    }
    Ok(TikhonovReport {
        x,
        iterations: it,
        residual_history: history,
        converged,
    })
}

/// Reconstruct every slice of a dense-angle scan sharing one system matrix.
pub fn reference_volume(a: &SparseProjection, sinograms: &[Vec<f64>], params: &TikhonovParams) -> Result<Vec<Vec<f64>>> {
    let alpha = params.alpha_for(a);
    sinograms
        .par_iter()
        .enumerate()
        .map(|(k, y)| {
            tikhonov_cgls(a, y, alpha, params.max_iter, params.tol)
                .map(|r| r.x)
                .map_err(|e| e.at_slice(k))
        })
        .collect()
}

/// Independent Tikhonov reconstruction of each sparse-angle slice.
pub fn independent_slices(scans: &[ScanSlice], matrices: &MatrixCache, params: &TikhonovParams) -> Result<Vec<Vec<f64>>> {
    scans
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let step = || {
                let a = matrices.get(&s.angles)?;
                let alpha = params.alpha_for(&a);
                Ok(tikhonov_cgls(&a, &s.sinogram, alpha, params.max_iter, params.tol)?.x)
            };
            step().map_err(|e: Error| e.at_slice(k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FanBeamGeometry, SliceAngleSet};
    use crate::projector::{build_matrix, ImageGrid};
    use nalgebra::{DMatrix, DVector};

    fn small_system(n_angles: usize) -> SparseProjection {
        let grid = ImageGrid::with_extent(16, 400.0).unwrap();
        let geom = FanBeamGeometry::centered(600.0, 400.0, 700.0, 32);
        build_matrix(&geom, &grid, &SliceAngleSet::equispaced(0, n_angles, 0.0).unwrap()).unwrap()
    }

    fn dense(a: &SparseProjection) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c as usize)] += v;
            }
        }
        m
    }

    #[test]
    fn identity_halves_the_data() {
        let a = SparseProjection::identity(5);
        let y = vec![1.0, -2.0, 3.0, 0.5, 8.0];
        let rep = tikhonov_cgls(&a, &y, 1.0, 10, 1e-14).unwrap();
        for (x, yi) in rep.x.iter().zip(&y) {
            assert!((x - yi / 2.0).abs() < 1e-14);
        }
        assert!(rep.converged);
    }

    #[test]
    fn matches_dense_normal_equations() {
        let a = small_system(90);
        let x_true: Vec<f64> = (0..256).map(|i| ((i * 37 % 17) as f64) / 17.0).collect();
        let y = a.forward(&x_true).unwrap();
        let alpha = default_alpha(&a);
        let rep = tikhonov_cgls(&a, &y, alpha, 2000, 1e-12).unwrap();
        let ad = dense(&a);
        let m = ad.transpose() * &ad + DMatrix::identity(256, 256) * alpha;
        let rhs = ad.transpose() * DVector::from_vec(y);
        let oracle = m.cholesky().unwrap().solve(&rhs);
        let err = (DVector::from_vec(rep.x) - &oracle).norm() / oracle.norm();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn residual_never_increases() {
        let a = small_system(7);
        let y: Vec<f64> = (0..a.rows()).map(|i| ((i * 13 % 29) as f64).sin()).collect();
        let rep = tikhonov_cgls(&a, &y, 1e-3, 200, 1e-13).unwrap();
        for w in rep.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} → {}", w[0], w[1]);
        }
    }

    #[test]
    fn norm_shrinks_with_alpha() {
        let a = small_system(12);
        let y: Vec<f64> = (0..a.rows()).map(|i| 1.0 + (i as f64 * 0.1).cos()).collect();
        let scale = a.normal_row_sum_bound();
        let norms: Vec<f64> = (-4..=3)
            .map(|e| {
                let x = tikhonov_cgls(&a, &y, scale * 10f64.powi(e), 3000, 1e-12).unwrap().x;
                dot(&x, &x).sqrt()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        assert!(*norms.last().unwrap() < 1e-2 * norms[0]);
    }

    #[test]
    fn zero_data_gives_zero() {
        let a = small_system(4);
        let rep = tikhonov_cgls(&a, &vec![0.0; a.rows()], 1.0, 10, 1e-10).unwrap();
        assert!(rep.x.iter().all(|&v| v == 0.0));
        assert!(tikhonov_cgls(&a, &vec![0.0; a.rows()], 0.0, 10, 1e-10).is_err());
    }

    #[test]
    fn unconverged_result_is_returned() {
        let a = small_system(30);
        let y = vec![1.0; a.rows()];
        let rep = tikhonov_cgls(&a, &y, 1e-6, 2, 1e-14).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
        assert!(matches!(rep.into_converged(), Err(Error::NotConverged { iterations: 2, .. })));
    }

    #[test]
    fn identical_slices_give_identical_reconstructions() {
        let a = small_system(36);
        let y = a.forward(&vec![0.2; 256]).unwrap();
        let out = reference_volume(&a, &[y.clone(), y], &TikhonovParams::default()).unwrap();
        assert_eq!(out[0], out[1]);
    }
}
