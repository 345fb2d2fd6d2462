//! End-to-end experiments on the synthetic log: scan, reconstruct, segment
//! and score against the dense-angle reference.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::{Arc, OnceLock};

use crate::baseline::{independent_slices, reference_volume};
use crate::config::RunConfig;
use crate::dpa::{finalize, multi_otsu, segment_block, BlockDims};
use crate::drkf::{run_pipeline, NoiseModel, PipelineOptions, PipelineOutput, RegularizerSchedule};
use crate::error::{Error, Result};
use crate::geometry::{RotationSchedule, Scheme, SliceAngleSet};
use crate::metrics::{block_average, dice, psnr};
use crate::phantom::{generate, peak_projection, scan_with_sets, simulate_scan, LogPhantom, ScanSlice};
use crate::prior::{build_reduced_basis, ReducedBasis};
use crate::projector::{build_matrix, ImageGrid, MatrixCache};
use crate::volume::{LabelVolume, Volume};

/// Shared inputs of every run on one phantom.
pub struct Experiment {
    pub cfg: RunConfig,
    pub grid: ImageGrid,
    pub phantom: LogPhantom,
    pub truth: Volume,
    pub truth_labels: LabelVolume,
    /// Standard deviation of the simulated measurement noise.
    pub noise_std: f64,
    pub matrices: MatrixCache,
    basis: OnceLock<Arc<ReducedBasis>>,
    reference: OnceLock<Arc<Reference>>,
}

/// Dense-angle reconstruction of the evaluation block and its masks.
pub struct Reference {
    pub slices: Range<usize>,
    pub images: Vec<Vec<f64>>,
    pub dpa_mask: Vec<u8>,
    pub otsu_mask: Vec<u8>,
}

/// Scores of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceScore {
    pub slice: usize,
    pub psnr_db: f64,
    /// Against the phantom itself rather than the reference.
    pub psnr_truth_db: f64,
    pub dice: f64,
    pub dice_sq: f64,
    pub otsu_dice_sq: f64,
}

/// One (scheme, source count) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub scheme: Scheme,
    pub n_sources: usize,
    pub slices: Vec<SliceScore>,
    pub clusters: usize,
}

impl CellResult {
    fn mean(&self, f: impl Fn(&SliceScore) -> f64) -> f64 {
        let v: Vec<f64> = self.slices.iter().map(f).collect();
        let c = v.len() / 2;
        block_average(&v, c, c).unwrap_or(f64::NAN)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|s| s.psnr_db)
    }

    pub fn mean_psnr_truth(&self) -> f64 {
        self.mean(|s| s.psnr_truth_db)
    }

    pub fn mean_dice_sq(&self) -> f64 {
        self.mean(|s| s.dice_sq)
    }

    pub fn mean_otsu_dice_sq(&self) -> f64 {
        self.mean(|s| s.otsu_dice_sq)
    }
}

/// Reconstruction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Drkf,
    /// Independent per-slice Tikhonov.
    Baseline,
}

impl Experiment {
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.image_grid()?;
        let phantom = cfg.phantom.build(grid)?;
        let (truth, truth_labels) = generate(&phantom)?;
        let peak = peak_projection(&truth, &cfg.geometry, &grid, cfg.scan.peak_angles)?;
        let noise_std = cfg.scan.noise_fraction * peak;
        log::info!("phantom {}² × {}, noise std {noise_std:.4}", grid.n, phantom.n_slices);
        let matrices = MatrixCache::new(cfg.geometry.clone(), grid, 8);
        Ok(Self {
            cfg,
            grid,
            phantom,
            truth,
            truth_labels,
            noise_std,
            matrices,
            basis: OnceLock::new(),
            reference: OnceLock::new(),
        })
    }

    /// Reduced basis at the configured rank, built on first use.
    pub fn basis(&self) -> Result<Arc<ReducedBasis>> {
        if let Some(b) = self.basis.get() {
            return Ok(b.clone());
        }
        let b = Arc::new(self.basis_with_rank(self.cfg.prior.rank_for(self.grid.n))?);
        Ok(self.basis.get_or_init(|| b).clone())
    }

    pub fn basis_with_rank(&self, rank: usize) -> Result<ReducedBasis> {
        build_reduced_basis(&self.cfg.prior.spec(), self.grid.n, rank)
    }

    /// Schedule for a sweep cell. Quarter-delta with a non-integer spacing
    /// uses the rounded quarter spacing unless one is configured.
    pub fn schedule_for(&self, scheme: Scheme, n_sources: usize) -> RotationSchedule {
        let mut s = self.cfg.schedule.clone();
        s.scheme = scheme;
        s.n_sources = n_sources;
        let mut sched = s.schedule();
        if scheme == Scheme::QuarterDelta && sched.quarter_delta_override.is_none() && 360 % n_sources != 0 {
            let inc = (360.0 / n_sources as f64 / 4.0).round().max(1.0) as u32;
            sched.quarter_delta_override = Some(inc);
        }
        sched
    }

    pub fn scan(&self, sched: &RotationSchedule) -> Result<Vec<ScanSlice>> {
        simulate_scan(
            &self.truth,
            &self.cfg.geometry,
            &self.grid,
            sched,
            self.noise_std,
            self.cfg.scan.seed,
        )
    }

    pub fn pipeline_options(&self) -> Result<PipelineOptions> {
        let f = &self.cfg.filter;
        let noise = NoiseModel::from_noise_std(f.q_factor * self.cfg.prior.sigma.powi(2), self.noise_std)?;
        Ok(PipelineOptions {
            noise,
            reg: RegularizerSchedule { slope: f.xi_slope },
            alpha_tik: f.alpha_tik.unwrap_or(noise.r_scalar),
            cache_bytes: f.cache_mb << 20,
        })
    }

    pub fn reconstruct_drkf(&self, scans: &[ScanSlice], basis: &ReducedBasis) -> Result<PipelineOutput> {
        run_pipeline(scans, &self.matrices, basis, &self.pipeline_options()?, |_, _| Ok(()))
    }

    pub fn reconstruct(&self, method: Method, scans: &[ScanSlice]) -> Result<Vec<Vec<f64>>> {
        match method {
            Method::Drkf => {
                let basis = self.basis()?;
                Ok(self.reconstruct_drkf(scans, &basis)?.slices)
            }
            Method::Baseline => independent_slices(scans, &self.matrices, &self.cfg.baseline),
        }
    }

    /// Dense-angle reconstruction of slices `range`.
    pub fn reference_slices(&self, range: Range<usize>) -> Result<Vec<Vec<f64>>> {
        if range.end > self.truth.n_slices || range.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "reference slices {range:?} outside 0..{}",
                self.truth.n_slices
            )));
        }
        let rc = &self.cfg.reference;
        let sub = Volume::from_slices(
            self.grid.n,
            self.grid.pixel_size,
            self.truth.slice_spacing,
            range.clone().map(|k| self.truth.slice(k).to_vec()).collect(),
        )?;
        let set = SliceAngleSet::equispaced(0, rc.n_angles, 0.0)?;
        let sets = vec![set.clone(); range.len()];
        let noise = if rc.noisy { self.noise_std } else { 0.0 };
        // distinct noise stream from the sparse scans
        let seed = self.cfg.scan.seed ^ 0x5EED_0F_DE45E ^ range.start as u64;
        let scans = scan_with_sets(&sub, &self.cfg.geometry, &self.grid, &sets, noise, seed)?;
        let a = build_matrix(&self.cfg.geometry, &self.grid, &set)?;
        let sinos: Vec<Vec<f64>> = scans.into_iter().map(|s| s.sinogram).collect();
        reference_volume(&a, &sinos, &rc.solver)
    }

    /// Reference of the evaluation block with its segmentations, computed
    /// once.
    pub fn reference(&self) -> Result<Arc<Reference>> {
        if let Some(r) = self.reference.get() {
            return Ok(r.clone());
        }
        let slices = self.cfg.metrics.block();
        let images = self.reference_slices(slices.clone())?;
        let block: Vec<f64> = images.concat();
        let (dpa_mask, _) = self.segment(&block, self.cfg.reference.n_angles)?;
        let otsu_mask = multi_otsu(&block, self.cfg.metrics.otsu_classes)?;
        let r = Arc::new(Reference {
            slices,
            images,
            dpa_mask,
            otsu_mask,
        });
        Ok(self.reference.get_or_init(|| r).clone())
    }

    /// DPA mask of a block of whole slices and its cluster count.
    pub fn segment(&self, block: &[f64], n_sources: usize) -> Result<(Vec<u8>, usize)> {
        let n = self.grid.n;
        let dims = BlockDims::new(n, n, block.len() / (n * n));
        let map = segment_block(block, dims, &self.cfg.dpa, n_sources)?;
        Ok((finalize(&map), map.n_clusters()))
    }

    /// Score the evaluation block of a full reconstruction.
    pub fn evaluate(&self, scheme: Scheme, n_sources: usize, recon: &[Vec<f64>]) -> Result<CellResult> {
        let reference = self.reference()?;
        let range = reference.slices.clone();
        if recon.len() < range.end {
            return Err(Error::DimensionMismatch {
                context: "reconstructed slices",
                expected: range.end,
                actual: recon.len(),
            });
        }
        let block: Vec<f64> = recon[range.clone()].concat();
        let (mask, clusters) = self.segment(&block, n_sources)?;
        let otsu = multi_otsu(&block, self.cfg.metrics.otsu_classes)?;
        let len = self.grid.n_pixels();
        let slices = range
            .clone()
            .enumerate()
            .map(|(b, k)| {
                let part = b * len..(b + 1) * len;
                let d = dice(&mask[part.clone()], &reference.dpa_mask[part.clone()])?;
                let od = dice(&otsu[part.clone()], &reference.otsu_mask[part])?;
                Ok(SliceScore {
                    slice: k,
                    psnr_db: psnr(&recon[k], &reference.images[b], None)?.db(),
                    psnr_truth_db: psnr(&recon[k], self.truth.slice(k), None)?.db(),
                    dice: d,
                    dice_sq: d * d,
                    otsu_dice_sq: od * od,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CellResult {
            scheme,
            n_sources,
            slices,
            clusters,
        })
    }

    /// Scan, reconstruct with the filter and score one cell.
    pub fn run_cell(&self, scheme: Scheme, n_sources: usize) -> Result<CellResult> {
        self.run_cell_with(scheme, n_sources, Method::Drkf)
    }

    pub fn run_cell_with(&self, scheme: Scheme, n_sources: usize, method: Method) -> Result<CellResult> {
        let sched = self.schedule_for(scheme, n_sources);
        let scans = self.scan(&sched)?;
        let recon = self.reconstruct(method, &scans)?;
        let cell = self.evaluate(scheme, n_sources, &recon)?;
        log::info!(
            "{scheme} × {n_sources}: psnr {:.2} dB, dice² {:.3}",
            cell.mean_psnr(),
            cell.mean_dice_sq()
        );
        Ok(cell)
    }

    /// Every configured (scheme, source count) cell, in order. Cells run one
    /// at a time; each already uses all threads internally.
    pub fn sweep(&self) -> Result<Vec<CellResult>> {
        let mut out = Vec::new();
        for &scheme in &self.cfg.sweep.schemes {
            for &n in &self.cfg.sweep.sources {
                out.push(
                    self.run_cell(scheme, n)
                        .map_err(|e| Error::Config(format!("sweep cell {scheme}/{n}: {e}")))?,
                );
            }
        }
        Ok(out)
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Per-slice table: `slice,scheme,n_sources,psnr_db,dice,dice_sq`.
pub fn metrics_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("slice,scheme,n_sources,psnr_db,dice,dice_sq\n");
    for c in cells {
        for r in &c.slices {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.slice,
                c.scheme,
                c.n_sources,
                fmt_f(r.psnr_db),
                fmt_f(r.dice),
                fmt_f(r.dice_sq)
            );
        }
    }
    s
}

/// Block means per cell.
pub fn summary_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("scheme,n_sources,mean_psnr_db,mean_psnr_truth_db,mean_dice_sq,mean_otsu_dice_sq,clusters\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.scheme,
            c.n_sources,
            fmt_f(c.mean_psnr()),
            fmt_f(c.mean_psnr_truth()),
            fmt_f(c.mean_dice_sq()),
            fmt_f(c.mean_otsu_dice_sq()),
            c.clusters
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.grid.n = 24;
        c.geometry.n_detectors = 96;
        c.phantom.n_slices = 14;
        c.metrics.burn_in = 10;
        c.metrics.block_half_width = 1;
        c.reference.n_angles = 60;
        c.dpa.k_hat = 20;
        c
    }

    #[test]
    fn quarter_delta_override_for_uneven_spacing() {
        let e = Experiment::prepare(tiny()).unwrap();
        assert_eq!(e.schedule_for(Scheme::QuarterDelta, 7).quarter_delta().unwrap(), 13);
        assert_eq!(e.schedule_for(Scheme::QuarterDelta, 11).quarter_delta().unwrap(), 8);
        assert_eq!(e.schedule_for(Scheme::QuarterDelta, 3).quarter_delta_override, None);
    }

    #[test]
    fn cell_runs_and_tables_are_well_formed() {
        let e = Experiment::prepare(tiny()).unwrap();
        let cell = e.run_cell(Scheme::QuarterDelta, 3).unwrap();
        assert_eq!(cell.slices.len(), 3);
        assert!(cell.mean_psnr().is_finite());
        let csv = metrics_csv(&[cell.clone()]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("10,quarter-delta,3,"));
        assert_eq!(summary_csv(&[cell]).lines().count(), 2);
    }

    #[test]
    fn baseline_method_runs() {
        let e = Experiment::prepare(tiny()).unwrap();
        let cell = e.run_cell_with(Scheme::Fixed, 3, Method::Baseline).unwrap();
        assert!(cell.mean_psnr().is_finite());
    }
}
