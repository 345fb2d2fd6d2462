//! Sparse fan-beam system matrices.
//!
//! Each row of a [`SparseProjection`] is one ray (source angle × detector
//! pixel) and holds the exact lengths of the ray's intersection with every
//! pixel it crosses, found by a Siddon-style walk over the grid lines.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use faer::{Mat, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngleKey, FanBeamGeometry, Point2, SliceAngleSet};

/// Square pixel grid centred on the rotation centre.
///
/// Pixel `p = iy * n + ix` has its centre at
/// `((ix + 0.5 - n/2) * pixel_size, (iy + 0.5 - n/2) * pixel_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub n: usize,
    pub pixel_size: f64,
    pub fov_radius: f64,
}

impl ImageGrid {
    pub fn new(n: usize, pixel_size: f64, fov_radius: f64) -> Result<Self> {
        let g = Self {
            n,
            pixel_size,
            fov_radius,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n × n` grid covering a square of side `extent`; the reconstruction
    /// disk is inscribed.
    pub fn with_extent(n: usize, extent: f64) -> Result<Self> {
        Self::new(n, extent / n as f64, extent / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Grid("grid needs at least one pixel per side".into()));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Grid(format!("bad pixel size {}", self.pixel_size)));
        }
        if !(self.fov_radius >= 0.0) || self.fov_radius > self.half_width() * (1.0 + 1e-12) {
            return Err(Error::Grid(format!(
                "fov radius {} must lie in [0, {}]",
                self.fov_radius,
                self.half_width()
            )));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.n * self.n
    }

    pub fn half_width(&self) -> f64 {
        self.n as f64 * self.pixel_size / 2.0
    }

    pub fn pixel_center(&self, p: usize) -> Point2 {
        let (iy, ix) = (p / self.n, p % self.n);
        let h = self.n as f64 / 2.0;
        Point2::new(
            (ix as f64 + 0.5 - h) * self.pixel_size,
            (iy as f64 + 0.5 - h) * self.pixel_size,
        )
    }

    /// Pixels whose centre lies inside the reconstruction disk.
    pub fn fov_mask(&self) -> Vec<bool> {
        let r2 = self.fov_radius * self.fov_radius;
        (0..self.n_pixels())
            .map(|p| {
                let c = self.pixel_center(p);
                c.x * c.x + c.y * c.y <= r2
            })
            .collect()
    }

    fn contains(&self, pt: Point2) -> bool {
        let h = self.half_width();
        pt.x.abs() <= h && pt.y.abs() <= h
    }
}

/// Pixel intersections of the segment `a → b`, in traversal order.
///
/// Appends `(pixel, length)` pairs to `out`. Segments shorter than a
/// 10⁻¹⁰ fraction of a pixel (grid-corner crossings) are dropped.
pub fn trace_ray(grid: &ImageGrid, a: Point2, b: Point2, out: &mut Vec<(u32, f64)>) {
    let n = grid.n;
    let h = grid.half_width();
    let ps = grid.pixel_size;
    let d = [b.x - a.x, b.y - a.y];
    let o = [a.x, a.y];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return;
    }

    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..2 {
        if d[ax] == 0.0 {
            if o[ax] < -h || o[ax] > h {
                return;
            }
        } else {
            let ta = (-h - o[ax]) / d[ax];
            let tb = (h - o[ax]) / d[ax];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return;
    }

    // Parameters of grid-line crossings strictly inside (t0, t1), per axis,
    // in increasing order.
    let crossings = |ax: usize| -> Vec<f64> {
        if d[ax] == 0.0 {
            return Vec::new();
        }
        let mut ts: Vec<f64> = (0..=n)
            .map(|i| (-h + i as f64 * ps - o[ax]) / d[ax])
            .filter(|t| *t > t0 && *t < t1)
            .collect();
        if d[ax] < 0.0 {
            ts.reverse();
        }
        ts
    };
    let tx = crossings(0);
    let ty = crossings(1);

    let min_len = 1e-10 * ps;
    let (mut i, mut j) = (0, 0);
    let mut prev = t0;
    loop {
        let next = match (tx.get(i), ty.get(j)) {
            (Some(&a), Some(&b)) => {
                if a <= b {
                    i += 1;
                    a
                } else {
                    j += 1;
                    b
                }
            }
            (Some(&a), None) => {
                i += 1;
                a
            }
            (None, Some(&b)) => {
                j += 1;
                b
            }
            (None, None) => t1,
        };
        let seg = (next - prev) * len;
        if seg > min_len {
            let tm = 0.5 * (prev + next);
            let mx = o[0] + tm * d[0];
            let my = o[1] + tm * d[1];
            let ix = (((mx + h) / ps).floor() as isize).clamp(0, n as isize - 1) as usize;
            let iy = (((my + h) / ps).floor() as isize).clamp(0, n as isize - 1) as usize;
            out.push(((iy * n + ix) as u32, seg));
        }
        if next >= t1 {
            break;
        }
        prev = next;
    }
}

/// Row-compressed fan-beam system matrix for one angle set.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseProjection {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    angles: SliceAngleSet,
}

const SPARSE_MAGIC: &[u8; 8] = b"SQCTCSR\0";
const DENSE_MAGIC: &[u8; 8] = b"SQCTDNS\0";
const FORMAT_VERSION: u64 = 1;

impl SparseProjection {
    /// Build from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(u32, f64)>>, angles: SliceAngleSet) -> Result<Self> {
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                if c as usize >= cols {
                    return Err(Error::DimensionMismatch {
                        context: "sparse column index",
                        expected: cols,
                        actual: c as usize,
                    });
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
            angles,
        })
    }

    /// The `n × n` identity, handy for exercising solvers.
    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n as u32).collect(),
            values: vec![1.0; n],
            angles: SliceAngleSet {
                slice_index: 0,
                angles_deg: Vec::new(),
            },
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn angles(&self) -> &SliceAngleSet {
        &self.angles
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = A x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "forward projection",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&c, &v)| v * x[c as usize]).sum()
            })
            .collect())
    }

    /// `x = Aᵀ y`.
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "adjoint projection",
                expected: self.rows,
                actual: y.len(),
            });
        }
        let mut x = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for (&c, &v) in c.iter().zip(v) {
                x[c as usize] += v * yi;
            }
        }
        Ok(x)
    }

    /// Dense product `A · P` for a column-major `P` with `cols` rows.
    pub fn mul_dense(&self, p: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if p.nrows() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "sparse-dense product",
                expected: self.cols,
                actual: p.nrows(),
            });
        }
        let rows = self.rows;
        let columns: Vec<Vec<f64>> = (0..p.ncols())
            .into_par_iter()
            .map(|c| {
                let col = p.col(c);
                (0..rows)
                    .map(|i| {
                        let (ci, vi) = self.row(i);
                        ci.iter().zip(vi).map(|(&k, &v)| v * col[k as usize]).sum()
                    })
                    .collect()
            })
            .collect();
        Ok(Mat::from_fn(rows, p.ncols(), |i, j| columns[j][i]))
    }

    /// Maximum absolute row sum of `AᵀA`, an upper bound on its spectral norm.
    pub fn normal_row_sum_bound(&self) -> f64 {
        let row_sums: Vec<f64> = (0..self.rows).map(|i| self.row(i).1.iter().sum()).collect();
        let at_a1 = self.adjoint(&row_sums).expect("row sums have one entry per row");
        at_a1.into_iter().fold(0.0, f64::max)
    }

    /// Serialize in the little-endian CSR format: 8-byte magic, then u64
    /// version, rows, cols, nnz; then `rows + 1` u64 row pointers, `nnz` u64
    /// column indices and `nnz` f64 values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SPARSE_MAGIC)?;
        for v in [FORMAT_VERSION, self.rows as u64, self.cols as u64, self.nnz() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &c in &self.col_idx {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`SparseProjection::write_to`]. The angle set is not part of
    /// the binary format and must be supplied.
    pub fn read_from<R: Read>(mut r: R, angles: SliceAngleSet) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != SPARSE_MAGIC {
            return Err("not a sparse matrix file".into());
        }
        let version = read_u64(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let row_ptr = (0..=rows).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let col_idx = (0..nnz)
            .map(|_| {
                let c = read_u64(&mut r)?;
                if c as usize >= cols || c > u32::MAX as u64 {
                    Err(format!("column index {c} out of range"))
                } else {
                    Ok(c as u32)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let values = (0..nnz).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<std::result::Result<Vec<_>, _>>()?;
        if row_ptr.first() != Some(&0) || row_ptr.last() != Some(&nnz) || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err("inconsistent row pointers".into());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
            angles,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u64::from_le_bytes(b))
}

/// Write a column-major dense matrix with the same header layout as the
/// sparse format (`nnz = rows * cols`), followed by the f64 entries.
pub fn write_dense<W: Write>(m: MatRef<'_, f64>, mut w: W) -> std::io::Result<()> {
    w.write_all(DENSE_MAGIC)?;
    let (r, c) = (m.nrows() as u64, m.ncols() as u64);
    for v in [FORMAT_VERSION, r, c, r * c] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(m.nrows() * 8);
    for j in 0..m.ncols() {
        buf.clear();
        for i in 0..m.nrows() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dense<R: Read>(mut r: R) -> std::result::Result<Mat<f64>, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != DENSE_MAGIC {
        return Err("not a dense matrix file".into());
    }
    if read_u64(&mut r)? != FORMAT_VERSION {
        return Err("unsupported version".into());
    }
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    if n != rows * cols {
        return Err("entry count does not match shape".into());
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| e.to_string())?;
    Ok(Mat::from_fn(rows, cols, |i, j| {
        let k = (j * rows + i) * 8;
        f64::from_le_bytes(bytes[k..k + 8].try_into().unwrap())
    }))
}

/// System matrix of `angles` on `grid`: row `i * n_detectors + j` is the ray
/// from the source at `angles[i]` to detector pixel `j`.
pub fn build_matrix(geom: &FanBeamGeometry, grid: &ImageGrid, angles: &SliceAngleSet) -> Result<SparseProjection> {
    geom.validate()?;
    grid.validate()?;
    let fans: Vec<_> = angles.angles_deg.iter().map(|&a| geom.source_positions(a)).collect();
    for fan in &fans {
        if grid.contains(fan.source) {
            return Err(Error::SourceInsideGrid {
                x: fan.source.x,
                y: fan.source.y,
            });
        }
    }
    let nd = geom.n_detectors;
    let rows: Vec<Vec<(u32, f64)>> = (0..fans.len() * nd)
        .into_par_iter()
        .with_min_len(64)
        .map(|r| {
            let fan = &fans[r / nd];
            let mut out = Vec::new();
            trace_ray(grid, fan.source, fan.detectors[r % nd], &mut out);
            out
        })
        .collect();
    SparseProjection::from_rows(grid.n_pixels(), rows, angles.clone())
}

/// Add i.i.d. zero-mean Gaussian noise of standard deviation `noise_std`.
pub fn add_noise(y: &[f64], noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!("noise std {noise_std} must be ≥ 0")));
    }
    if noise_std == 0.0 {
        return Ok(y.to_vec());
    }
    let normal = Normal::new(0.0, noise_std).expect("std validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// Thread-safe cache of system matrices keyed by quantized angle set.
///
/// Holds at most `capacity` matrices, evicting the oldest insertion.
pub struct MatrixCache {
    geom: FanBeamGeometry,
    grid: ImageGrid,
    capacity: usize,
    inner: Mutex<CacheInner>,
}

#[derive(Default)]
struct CacheInner {
    map: HashMap<AngleKey, Arc<SparseProjection>>,
    order: VecDeque<AngleKey>,
    hits: usize,
    misses: usize,
}

impl MatrixCache {
    pub fn new(geom: FanBeamGeometry, grid: ImageGrid, capacity: usize) -> Self {
        Self {
            geom,
            grid,
            capacity: capacity.max(1),
            inner: Mutex::new(CacheInner::default()),
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn get(&self, angles: &SliceAngleSet) -> Result<Arc<SparseProjection>> {
        let key = angles.key();
        {
            let mut inner = self.inner.lock().unwrap();
            if let Some(m) = inner.map.get(&key).cloned() {
                inner.hits += 1;
                return Ok(m);
            }
            inner.misses += 1;
        }
        let m = Arc::new(build_matrix(&self.geom, &self.grid, angles)?);
        let mut inner = self.inner.lock().unwrap();
        if !inner.map.contains_key(&key) {
            if inner.order.len() >= self.capacity {
                if let Some(old) = inner.order.pop_front() {
                    inner.map.remove(&old);
                }
            }
            inner.order.push_back(key.clone());
            inner.map.insert(key, m.clone());
        }
        Ok(m)
    }

    /// `(hits, misses)` so far.
    pub fn stats(&self) -> (usize, usize) {
        let inner = self.inner.lock().unwrap();
        (inner.hits, inner.misses)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
