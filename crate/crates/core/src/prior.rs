//! Gaussian prior covariance and its truncated eigenbasis.
//!
//! The squared-exponential kernel on a square grid factors over the two
//! axes, so the covariance is `Σ₁ ⊗ Σ₁` for the `n × n` one-dimensional
//! kernel `Σ₁`. Its eigenpairs are products of 1D eigenpairs, which lets us
//! build the reduced basis without ever forming the `n² × n²` matrix.

use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::projector::{read_dense, write_dense};

/// Parameters of the squared-exponential prior. Distances are measured in
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub sigma: f64,
    pub corr_length: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            corr_length: 1.5,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("prior sigma {} must be > 0", self.sigma)));
        }
        if !(self.corr_length > 0.0 && self.corr_length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "correlation length {} must be > 0",
                self.corr_length
            )));
        }
        Ok(())
    }

    /// `σ² exp(−d² / 2l²)` for pixels `i`, `j` of an `n × n` grid.
    pub fn covariance_entry(&self, n: usize, i: usize, j: usize) -> f64 {
        let (iy, ix) = ((i / n) as f64, (i % n) as f64);
        let (jy, jx) = ((j / n) as f64, (j % n) as f64);
        let d2 = (iy - jy).powi(2) + (ix - jx).powi(2);
        self.sigma * self.sigma * (-d2 / (2.0 * self.corr_length * self.corr_length)).exp()
    }

    /// The `n × n` one-dimensional factor, scaled so that `Σ₁ ⊗ Σ₁ = Σ`.
    pub fn kernel_1d(&self, n: usize) -> Mat<f64> {
        let l2 = 2.0 * self.corr_length * self.corr_length;
        Mat::from_fn(n, n, |i, j| {
            let d = i as f64 - j as f64;
            self.sigma * (-d * d / l2).exp()
        })
    }
}

/// Truncated prior basis: `P = U_r S_r^{1/2}` with `P Pᵀ` the best rank-`r`
/// approximation of the prior covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// Grid side length.
    pub n: usize,
    /// `n² × r`, column-major.
    pub p: Mat<f64>,
    /// Eigenvalues of the covariance, non-increasing. Also the diagonal of
    /// `PᵀP`, since the columns of `U` are orthonormal.
    pub singular_values: Vec<f64>,
}

impl ReducedBasis {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.n * self.n
    }

    /// `P c`.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        crate::linalg::mat_vec(self.p.as_ref(), c)
    }

    /// Save as two consecutive dense-matrix records: `P`, then the
    /// singular values as a single column.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_dense(self.p.as_ref(), &mut w).map_err(|e| Error::io(path, e))?;
        let s = Mat::from_fn(self.rank(), 1, |i, _| self.singular_values[i]);
        write_dense(s.as_ref(), &mut w).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(f);
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let p = read_dense(&mut r).map_err(fmt)?;
        let s = read_dense(&mut r).map_err(fmt)?;
        let n = (p.nrows() as f64).sqrt().round() as usize;
        if n * n != p.nrows() || s.ncols() != 1 || s.nrows() != p.ncols() {
            return Err(fmt("basis and singular values have inconsistent shapes".into()));
        }
        Ok(Self {
            n,
            singular_values: (0..s.nrows()).map(|i| s[(i, 0)]).collect(),
            p,
        })
    }
}

/// Eigenpairs of the 1D kernel, sorted by decreasing eigenvalue, negative
/// eigenvalues clipped to zero, each eigenvector signed so that its first
/// non-negligible entry is positive.
pub fn kernel_eigen_1d(spec: &PriorSpec, n: usize) -> Result<(Vec<f64>, Mat<f64>)> {
    let k = spec.kernel_1d(n);
    let (vals, vecs) = symmetric_eigen(k.as_ref())
        .ok_or_else(|| Error::NumericalBreakdown {
            slice: 0,
            reason: "1D kernel eigendecomposition failed".into(),
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();
    let mut u = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = vecs.col(src);
        let scale = (0..n).map(|i| col[i].abs()).fold(0.0, f64::max);
        let first = (0..n).map(|i| col[i]).find(|v| v.abs() > 1e-12 * scale).unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[(i, dst)] = sign * col[i];
        }
    }
    Ok((sorted_vals, u))
}

/// Index pairs `(a, b)` of 1D eigenvalues whose products are the `r`
/// largest, in decreasing order; equal products keep lexicographic order.
fn top_pairs(lambda: &[f64], r: usize) -> Vec<(usize, usize, f64)> {
    let n = lambda.len();
    let mut pairs: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, lambda[a] * lambda[b]))
        .collect();
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    pairs.truncate(r);
    pairs
}

/// Rank-`r` basis of the prior covariance on an `n × n` grid. Pixel
/// `p = iy * n + ix`; column `c` built from the 1D pair `(a, b)` holds
/// `sqrt(λ_a λ_b) u_a[iy] u_b[ix]`.
pub fn build_reduced_basis(spec: &PriorSpec, n: usize, r: usize) -> Result<ReducedBasis> {
    spec.validate()?;
    let n_pix = n * n;
    if r < 1 || r > n_pix {
        return Err(Error::RankOutOfRange { rank: r, max: n_pix });
    }
    let (lambda, u) = kernel_eigen_1d(spec, n)?;
    let pairs = top_pairs(&lambda, r);
    let weights: Vec<f64> = pairs.iter().map(|t| t.2.sqrt()).collect();
    let p = Mat::from_fn(n_pix, r, |i, c| {
        let (a, b, _) = pairs[c];
        weights[c] * u[(i / n, a)] * u[(i % n, b)]
    });
    Ok(ReducedBasis {
        n,
        p,
        singular_values: pairs.iter().map(|t| t.2).collect(),
    })
}
