//! Fan-beam acquisition geometry and per-slice source-angle schedules.
//!
//! All angles are in degrees and all lengths in scanner units. Image
//! coordinates have their origin at the centre of rotation. At angle 0 the
//! source sits on the positive y axis and the detector plate below the
//! origin; positive angles rotate the whole assembly counter-clockwise.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Counter-clockwise rotation about the origin.
    pub fn rotated(self, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Physical description of one source/detector pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FanBeamGeometry {
    /// Distance from the source to the centre of rotation.
    pub source_radius: f64,
    /// Distance from the centre of rotation to the detector plate.
    pub detector_radius: f64,
    /// Total extent of the detector plate.
    pub detector_width: f64,
    /// Lateral offset of the source.
    pub source_shift: f64,
    /// Lateral offset of the detector centre.
    pub detector_shift: f64,
    /// Detector tilt about its centre, degrees.
    pub detector_tilt: f64,
    pub n_detectors: usize,
}

impl Default for FanBeamGeometry {
    fn default() -> Self {
        Self {
            source_radius: 859.46,
            detector_radius: 705.37,
            detector_width: 1154.2,
            source_shift: 232.86,
            detector_shift: -24.65,
            detector_tilt: 0.16,
            n_detectors: 768,
        }
    }
}

/// Source position and detector pixel centres for one angle.
#[derive(Debug, Clone, PartialEq)]
pub struct RayFan {
    pub source: Point2,
    pub detectors: Vec<Point2>,
}

impl FanBeamGeometry {
    /// Geometry without lateral shifts or tilt.
    pub fn centered(source_radius: f64, detector_radius: f64, detector_width: f64, n_detectors: usize) -> Self {
        Self {
            source_radius,
            detector_radius,
            detector_width,
            source_shift: 0.0,
            detector_shift: 0.0,
            detector_tilt: 0.0,
            n_detectors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.source_radius,
            self.detector_radius,
            self.detector_width,
            self.source_shift,
            self.detector_shift,
            self.detector_tilt,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Geometry("non-finite parameter".into()));
        }
        if self.source_radius <= 0.0 || self.detector_radius <= 0.0 {
            return Err(Error::Geometry(format!(
                "radii must be positive (source {}, detector {})",
                self.source_radius, self.detector_radius
            )));
        }
        if self.detector_width <= 0.0 {
            return Err(Error::Geometry("detector width must be positive".into()));
        }
        if self.n_detectors == 0 {
            return Err(Error::Geometry("need at least one detector pixel".into()));
        }
        Ok(())
    }

    /// Width of a single detector pixel.
    pub fn detector_pitch(&self) -> f64 {
        self.detector_width / self.n_detectors as f64
    }

    /// Source point and detector pixel centres at `angle_deg`.
    ///
    /// In the unrotated frame the source is at `(source_shift, source_radius)`
    /// and the detector centre at `(detector_shift, -detector_radius)`; the
    /// plate is tilted about its centre, then everything is rotated by the
    /// angle.
    pub fn source_positions(&self, angle_deg: f64) -> RayFan {
        let source = Point2::new(self.source_shift, self.source_radius).rotated(angle_deg);
        let (ts, tc) = self.detector_tilt.to_radians().sin_cos();
        let pitch = self.detector_pitch();
        let half = self.n_detectors as f64 / 2.0;
        let detectors = (0..self.n_detectors)
            .map(|j| {
                let u = (j as f64 + 0.5 - half) * pitch;
                Point2::new(self.detector_shift + u * tc, -self.detector_radius + u * ts).rotated(angle_deg)
            })
            .collect();
        RayFan { source, detectors }
    }
}

/// Wrap an angle into `[0, 360)`.
pub fn normalize_deg(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Quantized, order-independent identity of an angle set (10⁻⁶ degree bins).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AngleKey(Vec<i64>);

impl AngleKey {
    pub fn from_angles(angles: &[f64]) -> Self {
        const BINS: i64 = 360_000_000;
        let mut q: Vec<i64> = angles
            .iter()
            .map(|a| ((normalize_deg(*a) * 1e6).round() as i64).rem_euclid(BINS))
            .collect();
        q.sort_unstable();
        AngleKey(q)
    }
}

/// The source angles used for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAngleSet {
    pub slice_index: usize,
    pub angles_deg: Vec<f64>,
}

impl SliceAngleSet {
    pub fn new(slice_index: usize, angles_deg: Vec<f64>) -> Result<Self> {
        let angles_deg: Vec<f64> = angles_deg.into_iter().map(normalize_deg).collect();
        if angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::Schedule("non-finite angle".into()));
        }
        let key = AngleKey::from_angles(&angles_deg);
        if key.0.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schedule("angles must be distinct modulo 360".into()));
        }
        Ok(Self { slice_index, angles_deg })
    }

    /// `n` equi-spaced angles starting at `start_deg`.
    pub fn equispaced(slice_index: usize, n: usize, start_deg: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Schedule("need at least one source".into()));
        }
        let delta = 360.0 / n as f64;
        Self::new(slice_index, (0..n).map(|i| start_deg + i as f64 * delta).collect())
    }

    /// The same set rigidly rotated by `by_deg`.
    pub fn rotated(&self, by_deg: f64) -> Self {
        Self {
            slice_index: self.slice_index,
            angles_deg: self.angles_deg.iter().map(|a| normalize_deg(a + by_deg)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    pub fn key(&self) -> AngleKey {
        AngleKey::from_angles(&self.angles_deg)
    }
}

/// How the source ring moves from one slice to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Fixed,
    OneDegree,
    QuarterDelta,
    RandomUniform,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Fixed,
        Scheme::OneDegree,
        Scheme::QuarterDelta,
        Scheme::RandomUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fixed => "fixed",
            Scheme::OneDegree => "one-degree",
            Scheme::QuarterDelta => "quarter-delta",
            Scheme::RandomUniform => "random-uniform",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "fixed" => Ok(Scheme::Fixed),
            "one-degree" | "onedegree" | "1deg" => Ok(Scheme::OneDegree),
            "quarter-delta" | "quarterdelta" | "delta4" => Ok(Scheme::QuarterDelta),
            "random-uniform" | "randomuniform" | "random" => Ok(Scheme::RandomUniform),
            _ => Err(Error::Schedule(format!("unknown scheme '{s}'"))),
        }
    }
}

/// Per-slice rotation plan for an equi-spaced source ring.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSchedule {
    pub scheme: Scheme,
    pub n_sources: usize,
    pub rng_seed: u64,
    pub quarter_delta_override: Option<u32>,
    /// Phase of the ring at slice 0.
    pub start_angle: f64,
}

impl RotationSchedule {
    pub fn new(scheme: Scheme, n_sources: usize) -> Self {
        Self {
            scheme,
            n_sources,
            rng_seed: 0,
            quarter_delta_override: None,
            start_angle: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_quarter_delta(mut self, increment: u32) -> Self {
        self.quarter_delta_override = Some(increment);
        self
    }

    /// Angular spacing between neighbouring sources.
    pub fn delta(&self) -> f64 {
        360.0 / self.n_sources as f64
    }

    fn check(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::Schedule("n_sources must be positive".into()));
        }
        if !self.start_angle.is_finite() {
            return Err(Error::Schedule("start angle must be finite".into()));
        }
        Ok(())
    }

    /// Constant per-slice increment of the quarter-delta scheme.
    ///
    /// The integer closest to Δ/4 that does not divide Δ, ties going to the
    /// smaller candidate. Requires an integer Δ unless an override is set.
    pub fn quarter_delta(&self) -> Result<u32> {
        self.check()?;
        if let Some(inc) = self.quarter_delta_override {
            if inc == 0 {
                return Err(Error::Schedule("quarter-delta override must be positive".into()));
            }
            return Ok(inc);
        }
        if 360 % self.n_sources != 0 {
            return Err(Error::Schedule(format!(
                "{} sources give a non-integer spacing 360/{}; set an explicit quarter-delta increment",
                self.n_sources, self.n_sources
            )));
        }
        Ok(nearest_non_divisor((360 / self.n_sources) as u32))
    }

    /// Angle sets for slices `0..n_slices`.
    pub fn materialize(&self, n_slices: usize) -> Result<Vec<SliceAngleSet>> {
        self.check()?;
        let base = SliceAngleSet::equispaced(0, self.n_sources, self.start_angle)?;
        let offsets: Vec<f64> = match self.scheme {
            Scheme::Fixed => vec![0.0; n_slices],
            Scheme::OneDegree => (0..n_slices).map(|k| k as f64).collect(),
            Scheme::QuarterDelta => {
                let inc = self.quarter_delta()? as f64;
                (0..n_slices).map(|k| k as f64 * inc).collect()
            }
            Scheme::RandomUniform => random_offsets(self.rng_seed, &base, n_slices)
                .into_iter()
                .map(|o| o as f64)
                .collect(),
        };
        Ok(offsets
            .into_iter()
            .enumerate()
            .map(|(k, off)| {
                let mut set = base.rotated(off);
                set.slice_index = k;
                set
            })
            .collect())
    }

    /// Angle set of slice `k`.
    pub fn angles_for_slice(&self, k: usize) -> Result<SliceAngleSet> {
        Ok(self
            .materialize(k + 1)?
            .pop()
            .expect("materialize returns k + 1 sets"))
    }
}

fn nearest_non_divisor(delta: u32) -> u32 {
    let target = delta as f64 / 4.0;
    let mut cands: Vec<u32> = (1..=delta.max(2)).collect();
    // closest to Δ/4 first; on equal distance the smaller candidate wins
    cands.sort_by(|a, b| {
        let da = (*a as f64 - target).abs();
        let db = (*b as f64 - target).abs();
        da.total_cmp(&db).then(a.cmp(b))
    });
    cands.into_iter().find(|c| delta % c != 0).unwrap_or(1)
}

/// Cumulative integer rotations for the random scheme.
///
/// Increments are drawn uniformly from 1..=359. Within one covering cycle a
/// draw is rejected if it would bring back an angle set already used in that
/// cycle. The cycle ends once the union of used angles, in 1° bins, covers
/// the whole circle.
fn random_offsets(seed: u64, base: &SliceAngleSet, n_slices: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = Vec::with_capacity(n_slices);
    let mut visited: HashSet<AngleKey> = HashSet::new();
    let mut covered = [false; 360];
    let mut n_covered = 0usize;
    let mut offset = 0u32;

    let visit = |offset: u32, visited: &mut HashSet<AngleKey>, covered: &mut [bool; 360], n_covered: &mut usize| {
        let set = base.rotated(offset as f64);
        visited.insert(set.key());
        for a in &set.angles_deg {
            let bin = (a.floor() as usize).min(359);
            if !covered[bin] {
                covered[bin] = true;
                *n_covered += 1;
            }
        }
        if *n_covered == 360 {
            visited.clear();
            *covered = [false; 360];
            *n_covered = 0;
            // the current set opens the next cycle
            visited.insert(set.key());
            for a in &set.angles_deg {
                let bin = (a.floor() as usize).min(359);
                if !covered[bin] {
                    covered[bin] = true;
                    *n_covered += 1;
                }
            }
        }
    };

    for k in 0..n_slices {
        if k > 0 {
            let mut accepted = None;
            for _ in 0..4096 {
                let inc: u32 = rng.random_range(1..=359);
                let cand = (offset + inc) % 360;
                if !visited.contains(&base.rotated(cand as f64).key()) {
                    accepted = Some(cand);
                    break;
                }
            }
            offset = match accepted {
                Some(c) => c,
                None => {
                    // every reachable set is used: start a fresh cycle
                    visited.clear();
                    covered = [false; 360];
                    n_covered = 0;
                    (offset + rng.random_range(1..=359u32)) % 360
                }
            };
        }
        visit(offset, &mut visited, &mut covered, &mut n_covered);
        offsets.push(offset);
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol
    }

    #[test]
    fn zero_shift_angle_zero() {
        let g = FanBeamGeometry::centered(859.46, 705.37, 1154.2, 769);
        let fan = g.source_positions(0.0);
        assert!(close(fan.source, Point2::new(0.0, 859.46), 1e-12));
        assert!(close(fan.detectors[384], Point2::new(0.0, -705.37), 1e-9));
    }

    #[test]
    fn half_turn_reflects_source() {
        let g = FanBeamGeometry::centered(859.46, 705.37, 1154.2, 768);
        let fan = g.source_positions(180.0);
        assert!(close(fan.source, Point2::new(0.0, -859.46), 1e-9));
    }

    #[test]
    fn default_geometry_matches_analytic_oracle() {
        // Frozen from an independent script: place the unrotated source at
        // (h_S, r_S), detector centre at (h_D, -r_D), tilt the plate by α_D
        // about its centre, then rotate by the acquisition angle.
        let g = FanBeamGeometry::default();
        let fan = g.source_positions(0.0);
        assert!(close(fan.source, Point2::new(232.86, 859.46), 1e-12));
        let first = Point2::new(-600.996_320_467_379_7, -706.979_466_731_478_9);
        let last = Point2::new(551.696_320_467_379_8, -703.760_533_268_521_2);
        assert!(close(fan.detectors[0], first, 1e-9), "{:?}", fan.detectors[0]);
        assert!(close(fan.detectors[767], last, 1e-9), "{:?}", fan.detectors[767]);

        let fan = g.source_positions(37.0);
        let src = Point2::new(-331.265_674_928_646_83, 826.533_921_756_432_3);
        let d0 = Point2::new(-54.506_138_793_984_405, -926.307_521_522_429_6);
        let d767 = Point2::new(864.137_933_910_173_5, -230.029_018_563_084_2);
        assert!(close(fan.source, src, 1e-9), "{:?}", fan.source);
        assert!(close(fan.detectors[0], d0, 1e-9), "{:?}", fan.detectors[0]);
        assert!(close(fan.detectors[767], d767, 1e-9), "{:?}", fan.detectors[767]);
    }

    #[test]
    fn geometry_validation() {
        let mut g = FanBeamGeometry::default();
        assert!(g.validate().is_ok());
        g.n_detectors = 0;
        assert!(g.validate().is_err());
        let mut g = FanBeamGeometry::default();
        g.source_radius = -1.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn quarter_delta_rule() {
        // Δ = 72: 18 divides 72, 17 and 19 tie, the smaller wins
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 5).quarter_delta().unwrap(), 17);
        // Δ = 120: 30 divides, 29 and 31 tie
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 3).quarter_delta().unwrap(), 29);
        // Δ = 40: 10 divides, 9 and 11 tie
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 9).quarter_delta().unwrap(), 9);
        // Δ = 360 → 90 divides → 89
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 1).quarter_delta().unwrap(), 89);
        // Δ = 24: 6 divides, 5 and 7 tie
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 15).quarter_delta().unwrap(), 5);
        // Δ = 90: Δ/4 = 22.5, nearest are 22 and 23, neither divides 90? 22 no → 22
        assert_eq!(RotationSchedule::new(Scheme::QuarterDelta, 4).quarter_delta().unwrap(), 22);
    }

    #[test]
    fn quarter_delta_rejects_non_integer_spacing() {
        let s = RotationSchedule::new(Scheme::QuarterDelta, 7);
        assert!(matches!(s.quarter_delta(), Err(Error::Schedule(_))));
        assert!(s.materialize(3).is_err());
        assert_eq!(s.with_quarter_delta(13).quarter_delta().unwrap(), 13);
    }

    #[test]
    fn quarter_delta_override_sixteen() {
        let s = RotationSchedule::new(Scheme::QuarterDelta, 5).with_quarter_delta(16);
        let sets = s.materialize(6).unwrap();
        for (k, set) in sets.iter().enumerate() {
            let expected: Vec<f64> = (0..5).map(|i| normalize_deg(72.0 * i as f64 + 16.0 * k as f64)).collect();
            assert_eq!(set.angles_deg, expected);
        }
        // five slices on, the ring has turned 80° = Δ + 8°
        assert_eq!(sets[5].angles_deg[0], 80.0);
    }

    #[test]
    fn random_schedule_example_rotations() {
        let base = SliceAngleSet::new(0, vec![0.0, 60.0, 120.0, 180.0, 240.0]).unwrap();
        let s1 = base.rotated(35.0);
        assert_eq!(s1.angles_deg, vec![35.0, 95.0, 155.0, 215.0, 275.0]);
        let s2 = s1.rotated(42.0);
        assert_eq!(s2.angles_deg, vec![77.0, 137.0, 197.0, 257.0, 317.0]);
    }

    #[test]
    fn slice_zero_is_base_set() {
        for scheme in Scheme::ALL {
            let s = RotationSchedule::new(scheme, 5).with_seed(11);
            let set = s.angles_for_slice(0).unwrap();
            assert_eq!(set.angles_deg, vec![0.0, 72.0, 144.0, 216.0, 288.0]);
        }
    }

    #[test]
    fn duplicate_angles_rejected() {
        assert!(SliceAngleSet::new(0, vec![10.0, 370.0]).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("quarter_delta".parse::<Scheme>().unwrap(), Scheme::QuarterDelta);
        assert_eq!("Random".parse::<Scheme>().unwrap(), Scheme::RandomUniform);
        assert!("spiral".parse::<Scheme>().is_err());
    }

    #[test]
    fn random_cycle_covers_circle_before_repeating() {
        let s = RotationSchedule::new(Scheme::RandomUniform, 3).with_seed(5);
        let sets = s.materialize(400).unwrap();
        let mut seen: HashSet<AngleKey> = HashSet::new();
        let mut covered = [false; 360];
        for set in &sets {
            let key = set.key();
            if covered.iter().all(|c| *c) {
                break;
            }
            assert!(!seen.contains(&key), "angle set repeated before full coverage");
            seen.insert(key);
            for a in &set.angles_deg {
                covered[a.floor() as usize] = true;
            }
        }
    }
}
