//! Run configuration, one TOML section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::TikhonovParams;
use crate::dpa::DpaParams;
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, RotationSchedule, Scheme};
use crate::phantom::{KnotSpec, LogPhantom};
use crate::prior::PriorSpec;
use crate::projector::ImageGrid;

/// Reduced rank used at 128², scaled with the pixel count on other grids.
pub const RANK_AT_128: usize = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    /// Side length of the square image domain.
    pub extent: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 128, extent: 400.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub scheme: Scheme,
    pub n_sources: usize,
    pub seed: u64,
    /// Per-slice increment for quarter-delta; required when 360 is not a
    /// multiple of the source count, otherwise derived.
    pub quarter_delta: Option<u32>,
    pub start_angle: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::QuarterDelta,
            n_sources: 3,
            seed: 11,
            quarter_delta: None,
            start_angle: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> RotationSchedule {
        let mut s = RotationSchedule::new(self.scheme, self.n_sources).with_seed(self.seed);
        s.start_angle = self.start_angle;
        s.quarter_delta_override = self.quarter_delta;
        s
    }
}

/// Phantom overrides on top of [`LogPhantom::default_for`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_slices: usize,
    pub seed: u64,
    pub wood_level: f64,
    pub ring_contrast: f64,
    pub sapwood_level: f64,
    pub knot_level: f64,
    /// Pixels per slice; `None` scales 0.1 px at 128² to the grid.
    pub pith_drift: Option<f64>,
    pub ring_spacing: Option<f64>,
    pub ring_phase_rate: f64,
    /// Explicit knots in grid units; `None` uses the default set.
    pub knots: Option<Vec<KnotSpec>>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let d = LogPhantom::default_for(ImageGrid::with_extent(128, 400.0).expect("default grid"));
        Self {
            n_slices: d.n_slices,
            seed: d.rng_seed,
            wood_level: d.wood_level,
            ring_contrast: d.ring_contrast,
            sapwood_level: d.sapwood_level,
            knot_level: d.knot_level,
            pith_drift: None,
            ring_spacing: None,
            ring_phase_rate: d.ring_phase_rate,
            knots: None,
        }
    }
}

impl PhantomConfig {
    pub fn build(&self, grid: ImageGrid) -> Result<LogPhantom> {
        let mut p = LogPhantom::default_for(grid);
        p.n_slices = self.n_slices;
        p.rng_seed = self.seed;
        p.wood_level = self.wood_level;
        p.ring_contrast = self.ring_contrast;
        p.sapwood_level = self.sapwood_level;
        p.knot_level = self.knot_level;
        p.ring_phase_rate = self.ring_phase_rate;
        if let Some(d) = self.pith_drift {
            p.pith_drift = d;
        }
        if let Some(s) = self.ring_spacing {
            p.ring_spacing = s;
        }
        if let Some(k) = &self.knots {
            p.knots = k.clone();
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Noise standard deviation as a fraction of the peak projection value.
    pub noise_fraction: f64,
    /// Equispaced sources used to find the peak projection.
    pub peak_angles: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            noise_fraction: 0.01,
            peak_angles: 36,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma: f64,
    pub corr_length: f64,
    /// `None` keeps the 128² rank-to-size ratio.
    pub rank: Option<usize>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let p = PriorSpec::default();
        Self {
            sigma: p.sigma,
            corr_length: p.corr_length,
            rank: None,
        }
    }
}

impl PriorConfig {
    pub fn spec(&self) -> PriorSpec {
        PriorSpec {
            sigma: self.sigma,
            corr_length: self.corr_length,
        }
    }

    pub fn rank_for(&self, n: usize) -> usize {
        self.rank
            .unwrap_or_else(|| ((RANK_AT_128 * n * n) as f64 / (128.0 * 128.0)).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// `q = q_factor · σ²`.
    pub q_factor: f64,
    /// Ridge per source angle.
    pub xi_slope: f64,
    /// First-slice Tikhonov weight; `None` uses the observation variance.
    pub alpha_tik: Option<f64>,
    /// Memory budget for cached projected systems.
    pub cache_mb: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            q_factor: 1e-3,
            xi_slope: 0.1,
            alpha_tik: None,
            cache_mb: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub n_angles: usize,
    /// Add the scan noise to the dense-angle data too.
    pub noisy: bool,
    pub solver: TikhonovParams,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            n_angles: 360,
            noisy: true,
            solver: TikhonovParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub burn_in: usize,
    pub block_half_width: usize,
    /// Classes of the multi-Otsu comparison segmentation.
    pub otsu_classes: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            burn_in: 50,
            block_half_width: 5,
            otsu_classes: 3,
        }
    }
}

impl MetricsConfig {
    /// Slices of the first evaluation block after burn-in.
    pub fn block(&self) -> std::ops::Range<usize> {
        self.burn_in..self.burn_in + 2 * self.block_half_width + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schemes: Vec<Scheme>,
    pub sources: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            sources: vec![1, 3, 5, 7, 9, 11, 13, 15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: FanBeamGeometry,
    pub grid: GridConfig,
    pub schedule: ScheduleConfig,
    pub phantom: PhantomConfig,
    pub scan: ScanConfig,
    pub prior: PriorConfig,
    pub filter: FilterConfig,
    pub reference: ReferenceConfig,
    /// Independent per-slice reconstruction.
    pub baseline: TikhonovParams,
    pub dpa: DpaParams,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    pub fn image_grid(&self) -> Result<ImageGrid> {
        ImageGrid::with_extent(self.grid.n, self.grid.extent)
    }

    /// Set every random seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.scan.seed = seed;
        self.schedule.seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let grid = self.image_grid()?;
        self.phantom.build(grid)?;
        self.prior.spec().validate()?;
        let rank = self.prior.rank_for(grid.n);
        if rank == 0 || rank > grid.n_pixels() {
            return Err(Error::RankOutOfRange {
                rank,
                max: grid.n_pixels(),
            });
        }
        self.dpa.validate()?;
        if !(self.scan.noise_fraction >= 0.0) {
            return Err(Error::Config("noise fraction must be ≥ 0".into()));
        }
        if !(self.filter.q_factor > 0.0) || !(self.filter.xi_slope >= 0.0) {
            return Err(Error::Config("q factor must be > 0 and ξ slope ≥ 0".into()));
        }
        if self.metrics.block().end > self.phantom.n_slices {
            return Err(Error::Config(format!(
                "evaluation block {:?} exceeds {} slices",
                self.metrics.block(),
                self.phantom.n_slices
            )));
        }
        if self.sweep.sources.contains(&0) || self.schedule.n_sources == 0 {
            return Err(Error::Config("source counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[dpa]") && text.contains("k_hat = 200"));
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn published_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.prior.rank_for(128), 3000);
        assert_eq!(c.prior.rank_for(64), 750);
        assert_eq!((c.prior.sigma, c.prior.corr_length), (0.1, 1.5));
        assert_eq!(c.filter.xi_slope, 0.1);
        assert_eq!(c.metrics.burn_in, 50);
        assert_eq!(c.metrics.block(), 50..61);
        assert_eq!(c.sweep.sources, vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(c.dpa.z_for_sources(3), 3.4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_toml("[grid]\nn = \"x\""), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[nonsense]\na = 1").is_err());
        assert!(matches!(
            RunConfig::from_toml("[prior]\nrank = 20000"),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(RunConfig::from_toml("[phantom]\nn_slices = 20").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("[schedule]\nscheme = \"fixed\"\nn_sources = 5\n").unwrap();
        assert_eq!(c.schedule.scheme, Scheme::Fixed);
        assert_eq!(c.schedule.seed, 11);
        assert_eq!(c.grid.n, 128);
    }
}
