//! Synthetic log volumes and simulated sequential scans.
//!
//! A log is a disk of wood with sinusoidal growth rings, a wet sapwood ring
//! as bright as the knots, and branch knots that grow outward from the pith
//! as the slice index increases. The pith (and the whole cross-section with
//! it) drifts slowly along a circle. All lengths are in the physical units of
//! the image grid except `pith_drift`, which is in pixels per slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, Point2, RotationSchedule, SliceAngleSet};
use crate::projector::{add_noise, build_matrix, ImageGrid, MatrixCache};
use crate::volume::{LabelVolume, Volume};

/// Subsamples per pixel side.
const SUPERSAMPLE: usize = 4;
/// Angular frequency of the pith's drift circle, per slice.
const DRIFT_OMEGA: f64 = std::f64::consts::TAU / 200.0;
/// Gap between the pith and the inner end of a knot.
const KNOT_GAP: f64 = 2.0;
/// Radial over tangential semi-axis ratio of a knot cross-section.
const KNOT_ELONGATION: f64 = 1.6;
/// Slices over which a new knot grows to full size.
const KNOT_RAMP: f64 = 20.0;

/// One branch knot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotSpec {
    pub start_slice: usize,
    /// Last slice containing the knot (inclusive).
    pub end_slice: usize,
    /// Direction from the pith, degrees counter-clockwise from `+x`.
    pub azimuth: f64,
    /// Outward motion of the knot per slice.
    pub elevation_rate: f64,
    /// Tangential semi-axis once fully grown.
    pub base_radius: f64,
}

/// Knot cross-section in pith-relative polar terms.
#[derive(Debug, Clone, Copy)]
struct KnotSection {
    center: f64,
    radial: f64,
    tangential: f64,
    cos: f64,
    sin: f64,
}

impl KnotSpec {
    fn section(&self, k: usize) -> Option<KnotSection> {
        if k < self.start_slice || k > self.end_slice {
            return None;
        }
        let t = (k - self.start_slice) as f64;
        let span = (self.end_slice - self.start_slice).max(1) as f64;
        let ramp = (0.25 + 0.75 * t / KNOT_RAMP).min(1.0);
        let tangential = self.base_radius * ramp * (1.0 + 0.5 * t / span);
        let radial = KNOT_ELONGATION * tangential;
        let (sin, cos) = self.azimuth.to_radians().sin_cos();
        Some(KnotSection {
            center: KNOT_GAP + radial + self.elevation_rate * t,
            radial,
            tangential,
            cos,
            sin,
        })
    }

    /// Largest distance from the pith reached by the knot.
    pub fn max_extent(&self) -> f64 {
        (self.start_slice..=self.end_slice)
            .filter_map(|k| self.section(k))
            .map(|s| s.center + s.radial)
            .fold(0.0, f64::max)
    }
}

impl KnotSection {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        let u = dx * self.cos + dy * self.sin - self.center;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.radial).powi(2) + (v / self.tangential).powi(2) <= 1.0
    }
}

/// Phantom description. See [`LogPhantom::default_for`] for the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogPhantom {
    pub n_slices: usize,
    pub grid: ImageGrid,
    pub slice_spacing: f64,
    pub background_level: f64,
    pub wood_level: f64,
    pub ring_contrast: f64,
    pub sapwood_level: f64,
    pub knot_level: f64,
    pub knots: Vec<KnotSpec>,
    /// Pixels per slice.
    pub pith_drift: f64,
    pub rng_seed: u64,
    pub log_radius: f64,
    pub sapwood_width: f64,
    /// Distance between growth rings.
    pub ring_spacing: f64,
    /// Phase change of the ring pattern per slice, radians.
    pub ring_phase_rate: f64,
}

/// Knots of the default phantom; every one of them is present over the
/// default evaluation block.
pub fn default_knots() -> Vec<KnotSpec> {
    let k = |start_slice, azimuth, elevation_rate, base_radius| KnotSpec {
        start_slice,
        end_slice: 60,
        azimuth,
        elevation_rate,
        base_radius,
    };
    vec![
        k(0, 20.0, 0.8, 10.0),
        k(5, 300.0, 0.9, 9.0),
        k(10, 200.0, 0.8, 8.0),
        k(20, 140.0, 0.9, 12.0),
        k(35, 250.0, 1.0, 9.0),
        k(42, 75.0, 1.0, 11.0),
    ]
}

impl LogPhantom {
    /// Default log scaled to `grid`, with geometry sized for a 400-unit
    /// field of view.
    pub fn default_for(grid: ImageGrid) -> Self {
        let s = grid.half_width() / 200.0;
        Self {
            n_slices: 61,
            grid,
            slice_spacing: 2.0,
            background_level: 0.0,
            wood_level: 0.20,
            ring_contrast: 0.03,
            sapwood_level: 0.40,
            knot_level: 0.40,
            knots: default_knots()
                .into_iter()
                .map(|k| KnotSpec {
                    elevation_rate: k.elevation_rate * s,
                    base_radius: k.base_radius * s,
                    ..k
                })
                .collect(),
            pith_drift: 0.1 * grid.n as f64 / 128.0,
            rng_seed: 7,
            log_radius: 170.0 * s,
            sapwood_width: 15.0 * s,
            ring_spacing: 14.0 * s,
            ring_phase_rate: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::Phantom(m));
        if self.n_slices == 0 {
            return bad("need at least one slice".into());
        }
        if !(self.background_level == 0.0
            && self.background_level < self.wood_level
            && self.wood_level < self.knot_level)
        {
            return bad("levels must satisfy 0 = background < wood < knot".into());
        }
        if self.sapwood_level < 0.9 * self.knot_level || self.sapwood_level > 1.1 * self.knot_level {
            return bad("sapwood level must lie within 10% of the knot level".into());
        }
        if !(self.ring_contrast >= 0.0) || self.wood_level + self.ring_contrast > self.knot_level {
            return bad("ring contrast must keep wood below the knot level".into());
        }
        if self.wood_level - self.ring_contrast < 0.0 {
            return bad("ring contrast would make wood negative".into());
        }
        if !(self.log_radius > 0.0 && self.sapwood_width >= 0.0 && self.sapwood_width < self.log_radius) {
            return bad("log radius must be positive and wider than the sapwood".into());
        }
        if !(self.ring_spacing > 0.0) || !(self.pith_drift >= 0.0) {
            return bad("ring spacing must be positive and drift non-negative".into());
        }
        let reach = (0..self.n_slices)
            .map(|k| {
                let p = self.pith(k);
                p.x.hypot(p.y)
            })
            .fold(0.0, f64::max);
        if self.log_radius + reach > self.grid.half_width() {
            return bad(format!(
                "log of radius {} drifting by up to {reach:.2} leaves the grid",
                self.log_radius
            ));
        }
        for (i, k) in self.knots.iter().enumerate() {
            if k.start_slice >= k.end_slice {
                return bad(format!("knot {i}: start slice must precede end slice"));
            }
            if !(k.base_radius > 0.0) || !(k.elevation_rate >= 0.0) {
                return bad(format!("knot {i}: radius must be positive and rate non-negative"));
            }
            let ext = k.max_extent();
            if ext > self.log_radius {
                return bad(format!(
                    "knot {i} reaches {ext:.2} from the pith, beyond the log radius {}",
                    self.log_radius
                ));
            }
        }
        Ok(())
    }

    /// Pith position at slice `k`.
    pub fn pith(&self, k: usize) -> Point2 {
        let rc = self.pith_drift * self.grid.pixel_size / DRIFT_OMEGA;
        let t = DRIFT_OMEGA * k as f64;
        Point2::new(rc * t.sin(), rc * (1.0 - t.cos()))
    }

    fn ring_phase0(&self) -> f64 {
        ChaCha8Rng::seed_from_u64(self.rng_seed).random_range(0.0..std::f64::consts::TAU)
    }

    /// Attenuation at a point and whether it belongs to a knot.
    fn sample(&self, pt: Point2, pith: Point2, sections: &[KnotSection], phase: f64) -> (f64, bool) {
        let (dx, dy) = (pt.x - pith.x, pt.y - pith.y);
        let rho = dx.hypot(dy);
        if rho > self.log_radius {
            return (self.background_level, false);
        }
        if sections.iter().any(|s| s.contains(dx, dy)) {
            return (self.knot_level, true);
        }
        if rho >= self.log_radius - self.sapwood_width {
            return (self.sapwood_level, false);
        }
        let ring = (std::f64::consts::TAU * rho / self.ring_spacing + phase).sin();
        (self.wood_level + self.ring_contrast * ring, false)
    }

    fn slice(&self, k: usize, phase0: f64) -> (Vec<f64>, Vec<u8>) {
        let g = &self.grid;
        let n = g.n;
        let pith = self.pith(k);
        let sections: Vec<KnotSection> = self.knots.iter().filter_map(|kn| kn.section(k)).collect();
        let phase = phase0 + self.ring_phase_rate * k as f64;
        let m = SUPERSAMPLE * SUPERSAMPLE;
        let top = self.knot_level.max(self.sapwood_level);
        let mut img = vec![0.0; n * n];
        let mut lab = vec![0u8; n * n];
        for p in 0..n * n {
            let c = g.pixel_center(p);
            let (mut acc, mut hits) = (0.0, 0usize);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let off = |s: usize| ((s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * g.pixel_size;
                    let (v, knot) = self.sample(Point2::new(c.x + off(sx), c.y + off(sy)), pith, &sections, phase);
                    acc += v;
                    hits += knot as usize;
                }
            }
            // the mean of values ≤ top can round above it
            img[p] = (acc / m as f64).min(top);
            lab[p] = (2 * hits >= m) as u8;
        }
        (img, lab)
    }
}

/// Render the phantom and its ground-truth knot mask. The sapwood ring is
/// not labelled.
pub fn generate(phantom: &LogPhantom) -> Result<(Volume, LabelVolume)> {
    phantom.validate()?;
    let phase0 = phantom.ring_phase0();
    let slices: Vec<(Vec<f64>, Vec<u8>)> = (0..phantom.n_slices)
        .into_par_iter()
        .map(|k| phantom.slice(k, phase0))
        .collect();
    let n = phantom.grid.n;
    let mut labels = Vec::with_capacity(n * n * phantom.n_slices);
    let mut images = Vec::with_capacity(phantom.n_slices);
    for (img, lab) in slices {
        images.push(img);
        labels.extend(lab);
    }
    let vol = Volume::from_slices(n, phantom.grid.pixel_size, phantom.slice_spacing, images)?;
    Ok((
        vol,
        LabelVolume {
            n,
            n_slices: phantom.n_slices,
            data: labels,
        },
    ))
}

/// Measurements of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSlice {
    pub angles: SliceAngleSet,
    /// Row `i * n_detectors + j` is detector pixel `j` of source `i`.
    pub sinogram: Vec<f64>,
}

/// Per-slice noise seed derived from the scan seed.
fn slice_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulate `y_k = A_k x_k + η_k` for every slice of `vol` following `sched`.
pub fn simulate_scan(
    vol: &Volume,
    geom: &FanBeamGeometry,
    grid: &ImageGrid,
    sched: &RotationSchedule,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<ScanSlice>> {
    let sets = sched.materialize(vol.n_slices)?;
    scan_with_sets(vol, geom, grid, &sets, noise_std, seed)
}

/// [`simulate_scan`] with explicit per-slice angle sets.
pub fn scan_with_sets(
    vol: &Volume,
    geom: &FanBeamGeometry,
    grid: &ImageGrid,
    sets: &[SliceAngleSet],
    noise_std: f64,
    seed: u64,
) -> Result<Vec<ScanSlice>> {
    if vol.n != grid.n {
        return Err(Error::DimensionMismatch {
            context: "volume side vs grid",
            expected: grid.n,
            actual: vol.n,
        });
    }
    if sets.len() != vol.n_slices {
        return Err(Error::DimensionMismatch {
            context: "angle sets vs slices",
            expected: vol.n_slices,
            actual: sets.len(),
        });
    }
    let cache = MatrixCache::new(geom.clone(), *grid, 4);
    (0..vol.n_slices)
        .into_par_iter()
        .map(|k| {
            let a = cache.get(&sets[k])?;
            let clean = a.forward(vol.slice(k))?;
            Ok(ScanSlice {
                angles: sets[k].clone(),
                sinogram: add_noise(&clean, noise_std, slice_seed(seed, k))?,
            })
        })
        .collect::<Result<Vec<_>>>()
}

/// Largest noiseless line integral of `vol` over `n_angles` equispaced
/// sources, used to scale the simulated noise.
pub fn peak_projection(vol: &Volume, geom: &FanBeamGeometry, grid: &ImageGrid, n_angles: usize) -> Result<f64> {
    let a = build_matrix(geom, grid, &SliceAngleSet::equispaced(0, n_angles, 0.0)?)?;
    let peaks = (0..vol.n_slices)
        .into_par_iter()
        .map(|k| Ok(a.forward(vol.slice(k))?.into_iter().fold(0.0, f64::max)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(peaks.into_iter().fold(0.0, f64::max))
}
