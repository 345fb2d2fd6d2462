//! Dimension-reduced Kalman filter over a sequence of slices.
//!
//! The state correction lives in the span of the prior basis `P`: the
//! reconstruction of slice `k` is `x_k = x_pred + P α`, and the covariance
//! of `α` is kept as a factor `φ = V Vᵀ`. All dense work happens in the
//! `r`-dimensional space, using `PᵀP = diag(s)`.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AngleKey;
use crate::linalg::{
    a_b, all_finite, at_b, cholesky_lower, cholesky_solve, invert_lower, mat_t_vec, mat_vec, solve_lower_in_place,
    symmetric_eigen,
};
use crate::phantom::ScanSlice;
use crate::prior::ReducedBasis;
use crate::projector::{MatrixCache, SparseProjection};

/// Scalar model and observation error variances: `Q = q I`, `R = r I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub q_scalar: f64,
    pub r_scalar: f64,
}

impl NoiseModel {
    /// Floor applied to the observation variance of noiseless scans.
    pub const R_FLOOR: f64 = 1e-6;

    pub fn new(q_scalar: f64, r_scalar: f64) -> Result<Self> {
        let m = Self { q_scalar, r_scalar };
        m.validate()?;
        Ok(m)
    }

    /// `r` matched to simulated noise of standard deviation `noise_std`.
    pub fn from_noise_std(q_scalar: f64, noise_std: f64) -> Result<Self> {
        Self::new(q_scalar, (noise_std * noise_std).max(Self::R_FLOOR))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_scalar > 0.0 && self.q_scalar.is_finite()) {
            return Err(Error::InvalidArgument(format!("q must be > 0, got {}", self.q_scalar)));
        }
        if !(self.r_scalar > 0.0 && self.r_scalar.is_finite()) {
            return Err(Error::InvalidArgument(format!("r must be > 0, got {}", self.r_scalar)));
        }
        Ok(())
    }
}

/// Ridge added to the inverse reduced covariance: `slope × n_angles`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSchedule {
    pub slope: f64,
}

impl Default for RegularizerSchedule {
    fn default() -> Self {
        Self { slope: 0.1 }
    }
}

impl RegularizerSchedule {
    pub fn ridge(&self, n_angles: usize) -> f64 {
        self.slope * n_angles as f64
    }
}

/// Filter state after the update of slice `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub k: usize,
    pub x_pred: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `r × r_eff` factor of the reduced covariance.
    pub v: Mat<f64>,
}

impl FilterState {
    /// `x_pred + P α`.
    pub fn reconstruction(&self, basis: &ReducedBasis) -> Vec<f64> {
        let mut x = basis.expand(&self.alpha);
        for (xi, pi) in x.iter_mut().zip(&self.x_pred) {
            *xi += pi;
        }
        x
    }

    /// `φ = V Vᵀ`.
    pub fn phi(&self) -> Mat<f64> {
        a_b(self.v.as_ref(), self.v.transpose())
    }

    pub fn effective_rank(&self) -> usize {
        self.v.ncols()
    }
}

/// Forecast for slice `k`, with the reduced inverse prediction covariance
/// `Λ = Pᵀ (C_p)⁻¹ P` already formed.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub k: usize,
    pub x_pred: Vec<f64>,
    /// Covariance factor carried over from the previous step.
    pub v: Mat<f64>,
    /// `Pᵀ (C_p)⁻¹ P`, `r × r`.
    pub lambda: Mat<f64>,
    q: f64,
    /// Cholesky factor of `I + Vᵀ S V / q`.
    inner_chol: Mat<f64>,
}

impl Prediction {
    /// `B = P V`. Dense `n_pixels × r_eff`; meant for small grids.
    pub fn b_matrix(&self, basis: &ReducedBasis) -> Mat<f64> {
        a_b(basis.p.as_ref(), self.v.as_ref())
    }

    /// `(C_p)⁻¹ P = P/q − B (BᵀB/q + I)⁻¹ BᵀP / q²`. Dense `n_pixels × r`;
    /// meant for small grids.
    pub fn c_inv_p(&self, basis: &ReducedBasis) -> Mat<f64> {
        let q = self.q;
        let b = self.b_matrix(basis);
        // BᵀP = Vᵀ S
        let s = &basis.singular_values;
        let mut z = Mat::from_fn(self.v.ncols(), s.len(), |i, j| self.v[(j, i)] * s[j]);
        solve_lower_in_place(self.inner_chol.as_ref(), &mut z);
        faer::linalg::triangular_solve::solve_upper_triangular_in_place(
            self.inner_chol.transpose(),
            z.as_mut(),
            crate::linalg::par(),
        );
        let corr = a_b(b.as_ref(), z.as_ref());
        Mat::from_fn(basis.p.nrows(), s.len(), |i, j| basis.p[(i, j)] / q - corr[(i, j)] / (q * q))
    }
}

/// `H = A P` and its Gram matrix `HᵀH` for one angle set.
#[derive(Debug, Clone)]
pub struct ProjectedSystem {
    pub h: Mat<f64>,
    pub gram: Mat<f64>,
}

impl ProjectedSystem {
    pub fn new(a: &SparseProjection, basis: &ReducedBasis) -> Result<Self> {
        let h = a.mul_dense(basis.p.as_ref())?;
        let gram = at_b(h.as_ref(), h.as_ref());
        Ok(Self { h, gram })
    }

    pub fn bytes(&self) -> usize {
        8 * (self.h.nrows() * self.h.ncols() + self.gram.nrows() * self.gram.ncols())
    }
}

fn check_dims(a: &SparseProjection, y: &[f64], basis: &ReducedBasis) -> Result<()> {
    if a.cols() != basis.n_pixels() {
        return Err(Error::DimensionMismatch {
            context: "system matrix columns vs basis rows",
            expected: basis.n_pixels(),
            actual: a.cols(),
        });
    }
    if y.len() != a.rows() {
        return Err(Error::DimensionMismatch {
            context: "sinogram length",
            expected: a.rows(),
            actual: y.len(),
        });
    }
    Ok(())
}

/// Reduced Tikhonov solve on the first slice.
///
/// `c = (HᵀH + α I)⁻¹ Hᵀ y₀` with `H = A₀ P`; the state starts at
/// `x_pred = P c`, `α = 0` and `φ = R (HᵀH + α I)⁻¹`, the posterior
/// covariance of `c` under the scaled prior.
pub fn init_first_slice(
    a0: &SparseProjection,
    sys: &ProjectedSystem,
    y0: &[f64],
    basis: &ReducedBasis,
    alpha_tik: f64,
    noise: &NoiseModel,
) -> Result<FilterState> {
    check_dims(a0, y0, basis)?;
    if !(alpha_tik >= 0.0) || !alpha_tik.is_finite() {
        return Err(Error::InvalidArgument(format!("Tikhonov weight {alpha_tik} must be ≥ 0")));
    }
    let r = basis.rank();
    let mut normal = sys.gram.clone();
    for i in 0..r {
        normal[(i, i)] += alpha_tik;
    }
    let g = cholesky_lower(normal.as_ref())
        .ok_or_else(|| Error::IllPosed("reduced normal matrix is singular; use a positive Tikhonov weight".into()))?;
    let rhs = mat_t_vec(sys.h.as_ref(), y0);
    let c = cholesky_solve(g.as_ref(), &rhs);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllPosed("reduced Tikhonov solution is not finite".into()));
    }
    let gi = invert_lower(g.as_ref());
    let sr = noise.r_scalar.sqrt();
    let v = Mat::from_fn(r, r, |i, j| sr * gi[(j, i)]);
    Ok(FilterState {
        k: 0,
        x_pred: basis.expand(&c),
        alpha: vec![0.0; r],
        v,
    })
}

/// Identity forecast and the reduced inverse prediction covariance.
pub fn predict(state: FilterState, basis: &ReducedBasis, noise: &NoiseModel) -> Result<Prediction> {
    let k = state.k + 1;
    let q = noise.q_scalar;
    let s = &basis.singular_values;
    let x_pred = state.reconstruction(basis);
    let v = state.v;
    let (r, r_eff) = (v.nrows(), v.ncols());

    // W = S V
    let w = Mat::from_fn(r, r_eff, |i, j| s[i] * v[(i, j)]);
    let mut inner = at_b(v.as_ref(), w.as_ref());
    for j in 0..r_eff {
        for i in 0..r_eff {
            inner[(i, j)] /= q;
        }
        inner[(j, j)] += 1.0;
    }
    let l = cholesky_lower(inner.as_ref()).ok_or_else(|| Error::NumericalBreakdown {
        slice: k,
        reason: "prediction covariance inner factorization failed".into(),
    })?;
    let mut y = w.transpose().to_owned();
    solve_lower_in_place(l.as_ref(), &mut y);
    let yty = at_b(y.as_ref(), y.as_ref());
    let q2 = q * q;
    let lambda = Mat::from_fn(r, r, |i, j| {
        let d = if i == j { s[i] / q } else { 0.0 };
        d - 0.5 * (yty[(i, j)] + yty[(j, i)]) / q2
    });
    if !all_finite(lambda.as_ref()) {
        return Err(Error::NumericalBreakdown {
            slice: k,
            reason: "non-finite reduced prediction precision".into(),
        });
    }
    Ok(Prediction {
        k,
        x_pred,
        v,
        lambda,
        q,
        inner_chol: l,
    })
}

/// Measurement update in the reduced space.
///
/// `φ = (HᵀH/R + Λ + ξ I)⁻¹`, `α = φ Hᵀ (y − A x_pred) / R`, with the
/// ridge `ξ` taken from `reg` and the number of angles in `a`.
pub fn update(
    pred: &Prediction,
    a: &SparseProjection,
    sys: &ProjectedSystem,
    y: &[f64],
    basis: &ReducedBasis,
    noise: &NoiseModel,
    reg: &RegularizerSchedule,
) -> Result<FilterState> {
    check_dims(a, y, basis)?;
    let k = pred.k;
    let r = basis.rank();
    if sys.h.ncols() != r || sys.h.nrows() != a.rows() {
        return Err(Error::DimensionMismatch {
            context: "projected system shape",
            expected: a.rows() * r,
            actual: sys.h.nrows() * sys.h.ncols(),
        });
    }
    let rinv = 1.0 / noise.r_scalar;
    let xi = reg.ridge(a.angles().len());
    let ax = a.forward(&pred.x_pred)?;
    let innovation: Vec<f64> = y.iter().zip(&ax).map(|(y, p)| y - p).collect();
    let b: Vec<f64> = mat_t_vec(sys.h.as_ref(), &innovation).into_iter().map(|v| v * rinv).collect();

    let f = Mat::from_fn(r, r, |i, j| {
        let ridge = if i == j { xi } else { 0.0 };
        0.5 * (sys.gram[(i, j)] + sys.gram[(j, i)]) * rinv + pred.lambda[(i, j)] + ridge
    });
    if !all_finite(f.as_ref()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown {
            slice: k,
            reason: "non-finite reduced precision or gradient".into(),
        });
    }

    let (alpha, v) = match cholesky_lower(f.as_ref()) {
        Some(g) => {
            let alpha = cholesky_solve(g.as_ref(), &b);
            let gi = invert_lower(g.as_ref());
            (alpha, gi.transpose().to_owned())
        }
        None => {
            log::warn!("slice {k}: reduced precision not positive definite, using clipped pseudo-inverse");
            pseudo_inverse_factor(&f, &b).ok_or_else(|| Error::NumericalBreakdown {
                slice: k,
                reason: "eigendecomposition of reduced precision failed".into(),
            })?
        }
    };
    if alpha.iter().any(|v| !v.is_finite()) || !all_finite(v.as_ref()) {
        return Err(Error::NumericalBreakdown {
            slice: k,
            reason: "non-finite reduced covariance".into(),
        });
    }
    Ok(FilterState {
        k,
        x_pred: pred.x_pred.clone(),
        alpha,
        v,
    })
}

/// Eigenvalue-clipped inverse of a symmetric matrix: returns `F⁺ b` and a
/// factor `V` with `V Vᵀ = F⁺`, dropping eigenvalues below `10⁻¹² · max`.
fn pseudo_inverse_factor(f: &Mat<f64>, b: &[f64]) -> Option<(Vec<f64>, Mat<f64>)> {
    let (vals, vecs) = symmetric_eigen(f.as_ref())?;
    let max = vals.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 1e-12 * max).collect();
    let v = Mat::from_fn(f.nrows(), keep.len(), |i, j| vecs[(i, keep[j])] / vals[keep[j]].sqrt());
    let vtb = mat_t_vec(v.as_ref(), b);
    Some((mat_vec(v.as_ref(), &vtb), v))
}

/// Per-slice record written to the telemetry log.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTelemetry {
    pub slice: usize,
    pub wall_ms: f64,
    /// `‖y_k − A_k x_k‖`.
    pub residual_norm: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub slices: Vec<Vec<f64>>,
    pub telemetry: Vec<SliceTelemetry>,
}

/// Options for [`run_pipeline`].
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub noise: NoiseModel,
    pub reg: RegularizerSchedule,
    /// Tikhonov weight for the first slice.
    pub alpha_tik: f64,
    /// Memory budget for cached `A P` products.
    pub cache_bytes: usize,
}

struct SystemCache {
    map: HashMap<AngleKey, Arc<ProjectedSystem>>,
    order: VecDeque<AngleKey>,
    bytes: usize,
    budget: usize,
}

impl SystemCache {
    fn get_or_build(&mut self, a: &SparseProjection, basis: &ReducedBasis) -> Result<Arc<ProjectedSystem>> {
        let key = a.angles().key();
        if let Some(s) = self.map.get(&key) {
            return Ok(s.clone());
        }
        let sys = Arc::new(ProjectedSystem::new(a, basis)?);
        let size = sys.bytes();
        while self.bytes + size > self.budget {
            let Some(old) = self.order.pop_front() else { break };
            if let Some(s) = self.map.remove(&old) {
                self.bytes -= s.bytes();
            }
        }
        if size <= self.budget {
            self.bytes += size;
            self.order.push_back(key.clone());
            self.map.insert(key, sys.clone());
        }
        Ok(sys)
    }
}

/// Run the filter over a scanned volume: reduced Tikhonov on slice 0, then
/// predict/update for every following slice.
///
/// `sink` receives each reconstruction as soon as it is available. Any
/// failure aborts the run and reports the slice index.
pub fn run_pipeline<F>(
    scans: &[ScanSlice],
    matrices: &MatrixCache,
    basis: &ReducedBasis,
    opts: &PipelineOptions,
    mut sink: F,
) -> Result<PipelineOutput>
where
    F: FnMut(usize, &[f64]) -> Result<()>,
{
    opts.noise.validate()?;
    if basis.n_pixels() != matrices.grid().n_pixels() {
        return Err(Error::DimensionMismatch {
            context: "basis rows vs grid pixels",
            expected: matrices.grid().n_pixels(),
            actual: basis.n_pixels(),
        });
    }
    let mut cache = SystemCache {
        map: HashMap::new(),
        order: VecDeque::new(),
        bytes: 0,
        budget: opts.cache_bytes,
    };
    let mut out = PipelineOutput::default();
    let mut state: Option<FilterState> = None;
    for (k, scan) in scans.iter().enumerate() {
        let t0 = Instant::now();
        let mut step = || -> Result<(FilterState, Arc<SparseProjection>)> {
            let a = matrices.get(&scan.angles)?;
            let sys = cache.get_or_build(&a, basis)?;
            let next = match state.take() {
                None => init_first_slice(&a, &sys, &scan.sinogram, basis, opts.alpha_tik, &opts.noise)?,
                Some(prev) => {
                    let pred = predict(prev, basis, &opts.noise)?;
                    update(&pred, &a, &sys, &scan.sinogram, basis, &opts.noise, &opts.reg)?
                }
            };
            Ok((next, a))
        };
        let (mut next, a) = step().map_err(|e| e.at_slice(k))?;
        let ridge = if k == 0 { 0.0 } else { opts.reg.ridge(a.angles().len()) };
        next.k = k;
        let x = next.reconstruction(basis);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBreakdown {
                slice: k,
                reason: "non-finite reconstruction".into(),
            });
        }
        let ax = a.forward(&x)?;
        let residual_norm = ax
            .iter()
            .zip(&scan.sinogram)
            .map(|(p, y)| (y - p) * (y - p))
            .sum::<f64>()
            .sqrt();
        sink(k, &x).map_err(|e| e.at_slice(k))?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log::debug!("slice {k}: {wall_ms:.1} ms, residual {residual_norm:.4e}");
        out.telemetry.push(SliceTelemetry {
            slice: k,
            wall_ms,
            residual_norm,
            ridge,
        });
        out.slices.push(x);
        state = Some(next);
    }
    Ok(out)
}
