//! Density-peak segmentation of reconstructed slice blocks.
//!
//! Reconstructed intensities are used directly as densities. Cluster centres
//! are voxels that beat all of their `k̂` nearest neighbours in the
//! error-scaled log-density `g = log ρ − ζ`; every other voxel follows its
//! nearest higher voxel. Clusters whose peak does not rise significantly
//! above the saddle to a neighbour are merged, and the surviving clusters
//! (minus their halo) form the anomaly mask.

pub mod knn;
pub mod otsu;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use knn::BlockDims;
use knn::{radius_for, sorted_offsets, Offset};
pub use otsu::multi_otsu;

/// How the per-voxel log-density error is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaMode {
    /// `ζ = noise_std / ρ`.
    Propagated,
    /// `ζ = noise_std / noise_mean` everywhere.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpaParams {
    /// Background noise mean; also the density floor.
    pub noise_mean: f64,
    pub noise_std: f64,
    pub k_hat: usize,
    /// Merge confidence. `None` picks 3.4 below 7 sources and 2.4 otherwise.
    pub z: Option<f64>,
    pub zeta_mode: ZetaMode,
    /// Demote voxels below their cluster's highest saddle to the halo.
    pub halo: bool,
    /// Radius of the neighbourhood averaged by the background test.
    pub background_radius: usize,
    /// Voxels whose neighbourhood mean is below this multiple of the noise
    /// mean are background. Zero disables the test.
    pub background_factor: f64,
    /// Estimate the noise std from the background voxels of each block,
    /// using `noise_std` as a lower bound.
    pub estimate_noise: bool,
}

impl Default for DpaParams {
    fn default() -> Self {
        Self {
            noise_mean: 0.033,
            noise_std: 0.003,
            k_hat: 200,
            z: None,
            zeta_mode: ZetaMode::Propagated,
            halo: true,
            background_radius: 3,
            background_factor: 2.0,
            estimate_noise: true,
        }
    }
}

impl DpaParams {
    pub fn z_for_sources(&self, n_sources: usize) -> f64 {
        self.z.unwrap_or(if n_sources < 7 { 3.4 } else { 2.4 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_mean > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::InvalidArgument("noise mean and std must be positive".into()));
        }
        if self.k_hat < 1 {
            return Err(Error::InvalidArgument("neighbourhood size must be at least 1".into()));
        }
        if let Some(z) = self.z {
            if !(z >= 0.0) {
                return Err(Error::InvalidArgument(format!("confidence Z {z} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Per-voxel densities and neighbourhood structure of one block.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub dims: BlockDims,
    /// Noise std the errors were derived from.
    pub noise_std: f64,
    pub log_rho: Vec<f64>,
    pub zeta: Vec<f64>,
    pub g: Vec<f64>,
    /// `false` for pre-masked background voxels, which take no part in
    /// clustering and end up in the halo.
    pub active: Vec<bool>,
    pub k_hat: usize,
    offsets: Vec<Offset>,
}

impl DensityField {
    /// Whether voxel `i` ranks above voxel `j`: larger `g`, ties to the
    /// lower index.
    #[inline]
    pub fn beats(&self, i: usize, j: usize) -> bool {
        self.g[i] > self.g[j] || (self.g[i] == self.g[j] && i < j)
    }

    /// Active voxels in neighbour order from `i`, up to the walk radius.
    pub fn walk(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.offsets
            .iter()
            .filter_map(move |o| self.dims.offset(i, o))
            .filter(move |&j| self.active[j])
    }

    /// The `k̂` nearest active voxels of `i` (fewer if the walk runs out).
    pub fn neighbours(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        out.extend(self.walk(i).take(self.k_hat));
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Fewest background voxels for a noise estimate.
const MIN_BACKGROUND: usize = 100;

/// Standard deviation of the raw values of the background voxels.
fn background_std(block: &[f64], active: &[bool]) -> Option<f64> {
    let bg: Vec<f64> = block
        .iter()
        .zip(active)
        .filter(|&(v, &a)| !a && v.is_finite())
        .map(|(&v, _)| v)
        .collect();
    if bg.len() < MIN_BACKGROUND {
        return None;
    }
    let mean = bg.iter().sum::<f64>() / bg.len() as f64;
    Some((bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bg.len() as f64).sqrt())
}

/// Build densities for a block of `dims.nz` slices laid out slice-major.
pub fn make_density_field(block: &[f64], dims: BlockDims, params: &DpaParams) -> Result<DensityField> {
    params.validate()?;
    if block.len() != dims.len() {
        return Err(Error::DimensionMismatch {
            context: "density block",
            expected: dims.len(),
            actual: block.len(),
        });
    }
    let floor = params.noise_mean;
    let active: Vec<bool> = if params.background_factor > 0.0 {
        let ball = sorted_offsets(dims, params.background_radius);
        let limit = params.background_factor * floor;
        (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let (mut sum, mut cnt) = (block[i], 1.0);
                for o in &ball {
                    if let Some(j) = dims.offset(i, o) {
                        sum += block[j];
                        cnt += 1.0;
                    }
                }
                sum / cnt >= limit
            })
            .collect()
    } else {
        vec![true; dims.len()]
    };
    let noise_std = if params.estimate_noise {
        background_std(block, &active).map_or(params.noise_std, |s| s.max(params.noise_std))
    } else {
        params.noise_std
    };

    let rho: Vec<f64> = block.iter().map(|&v| if v.is_finite() { v.max(floor) } else { floor }).collect();
    let log_rho: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
    let zeta: Vec<f64> = match params.zeta_mode {
        ZetaMode::Propagated => rho.iter().map(|r| noise_std / r).collect(),
        ZetaMode::Constant => vec![noise_std / floor; rho.len()],
    };
    let g: Vec<f64> = log_rho.iter().zip(&zeta).map(|(l, z)| l - z).collect();

    // Generous walk radius: the k̂ nearest active voxels of points next to
    // the background or the block faces lie further out than in the bulk.
    let radius = radius_for(dims, 8 * params.k_hat).max(1);
    Ok(DensityField {
        dims,
        noise_std,
        log_rho,
        zeta,
        g,
        active,
        k_hat: params.k_hat,
        offsets: sorted_offsets(dims, radius),
    })
}

/// Centres and the chained assignment that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct Preliminary {
    /// Centre voxel of each cluster, highest first.
    pub centers: Vec<usize>,
    /// Cluster of every voxel, `-1` for background.
    pub labels: Vec<i32>,
    /// Set when the field is flat and a single arbitrary centre was chosen.
    pub degenerate: bool,
}

/// Active voxels sorted from highest to lowest rank.
fn rank_order(field: &DensityField) -> Vec<usize> {
    let mut order: Vec<usize> = (0..field.dims.len()).filter(|&i| field.active[i]).collect();
    order.par_sort_unstable_by(|&a, &b| field.g[b].total_cmp(&field.g[a]).then(a.cmp(&b)));
    order
}

/// Local maxima that beat all `k̂` neighbours and sit in no higher voxel's
/// neighbourhood; every other voxel joins the cluster of its nearest
/// higher voxel.
pub fn find_centers(field: &DensityField) -> Preliminary {
    let n = field.dims.len();
    let candidate: Vec<bool> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |nb, i| {
            if !field.active[i] {
                return false;
            }
            field.neighbours(i, nb);
            nb.iter().all(|&j| field.beats(i, j))
        })
        .collect();
    // a candidate inside the neighbourhood of a higher voxel is not a centre
    let dominated: Vec<usize> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |nb, j| {
            if !field.active[j] {
                return Vec::new();
            }
            field.neighbours(j, nb);
            nb.iter().copied().filter(|&i| candidate[i] && field.beats(j, i)).collect::<Vec<_>>()
        })
        .flatten()
        .collect();
    let mut is_center = candidate;
    for i in dominated {
        is_center[i] = false;
    }

    let order = rank_order(field);
    let mut labels = vec![-1i32; n];
    let mut centers = Vec::new();
    for &i in &order {
        if is_center[i] {
            labels[i] = centers.len() as i32;
            centers.push(i);
            continue;
        }
        let parent = field
            .walk(i)
            .find(|&j| field.beats(j, i))
            .or_else(|| {
                // beyond the walk radius: exhaustive search
                order
                    .iter()
                    .copied()
                    .take_while(|&j| j != i)
                    .min_by_key(|&j| field.dims.key(i, j))
            })
            .expect("a non-centre voxel always has a higher voxel");
        labels[i] = labels[parent];
    }
    let degenerate = order.len() > 1 && {
        let g0 = field.g[order[0]];
        order.iter().all(|&i| field.g[i] == g0)
    };
    Preliminary {
        centers,
        labels,
        degenerate,
    }
}

/// Highest boundary voxel between two clusters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Saddle {
    pub voxel: usize,
    pub log_rho: f64,
    pub zeta: f64,
    pub g: f64,
}

/// Saddles keyed by cluster pair `(a, b)` with `a < b`.
pub type SaddleTable = BTreeMap<(usize, usize), Saddle>;

/// Saddle points between every pair of adjacent clusters.
///
/// Voxel `i` of cluster `c` lies on the boundary with `c'` when its nearest
/// voxel `j` of `c'` is among its `k̂` neighbours and `i` is the voxel of `c`
/// nearest to `j`.
pub fn find_saddles(field: &DensityField, labels: &[i32]) -> SaddleTable {
    let n = field.dims.len();
    let borders: Vec<Vec<(usize, usize, usize)>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |nb, i| {
            if !field.active[i] || labels[i] < 0 {
                return Vec::new();
            }
            let c = labels[i];
            field.neighbours(i, nb);
            let mut seen: Vec<i32> = Vec::new();
            let mut out = Vec::new();
            for &j in nb.iter() {
                let cj = labels[j];
                if cj == c || cj < 0 || seen.contains(&cj) {
                    continue;
                }
                seen.push(cj);
                let nearest_c = field.walk(j).find(|&m| labels[m] == c);
                if nearest_c == Some(i) {
                    let (a, b) = (c.min(cj) as usize, c.max(cj) as usize);
                    out.push((a, b, i));
                }
            }
            out
        })
        .collect();
    let mut table = SaddleTable::new();
    for (a, b, i) in borders.into_iter().flatten() {
        let better = match table.get(&(a, b)) {
            Some(s) => field.beats(i, s.voxel),
            None => true,
        };
        if better {
            table.insert(
                (a, b),
                Saddle {
                    voxel: i,
                    log_rho: field.log_rho[i],
                    zeta: field.zeta[i],
                    g: field.g[i],
                },
            );
        }
    }
    table
}

/// One evaluation of the merge criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    /// Current representatives of the two clusters, preliminary numbering.
    pub a: usize,
    pub b: usize,
    pub saddle: Saddle,
    pub merged: bool,
}

/// Final clustering of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub dims: BlockDims,
    /// Per-voxel cluster `0..C`, or `-1` for the halo.
    pub labels: Vec<i32>,
    /// Centre voxel per final cluster, highest first.
    pub centers: Vec<usize>,
    /// Saddles between final clusters.
    pub saddle_table: SaddleTable,
    /// Merge decisions in the order they were taken.
    pub merges: Vec<MergeRecord>,
    pub z: f64,
    pub noise_std: f64,
    pub degenerate: bool,
    /// Copy of the field's `g`, kept for halo demotion.
    pub g: Vec<f64>,
    pub halo: bool,
}

fn significant(field: &DensityField, center: usize, s: &Saddle, z: f64) -> bool {
    field.log_rho[center] - s.log_rho >= z * (field.zeta[center] + s.zeta)
}

/// Merge clusters whose peak is within `Z(ζ_c + ζ_s)` of the saddle in log
/// density, visiting pairs from the highest saddle down.
///
/// The absorbed cluster is always the one with the lower centre. Saddles of
/// a merged cluster are the maxima over its parts, and pairs whose saddle
/// changed are evaluated again.
pub fn merge_clusters(
    field: &DensityField,
    prelim: &Preliminary,
    saddles: &SaddleTable,
    z: f64,
    halo: bool,
) -> SegmentationMap {
    let nc = prelim.centers.len();
    // representative of each preliminary cluster
    let mut rep: Vec<usize> = (0..nc).collect();
    let mut table = saddles.clone();
    let mut pending: BTreeSet<(usize, usize)> = table.keys().copied().collect();
    let mut merges = Vec::new();
    let key = |s: &Saddle| s.voxel;

    while let Some(&(a, b)) = pending.iter().max_by(|p, q| {
        let (sp, sq) = (&table[p], &table[q]);
        // highest saddle first; ties go to the lower voxel index, then the
        // lower pair
        sp.log_rho
            .total_cmp(&sq.log_rho)
            .then(key(sq).cmp(&key(sp)))
            .then(q.cmp(p))
    }) {
        pending.remove(&(a, b));
        let s = table[&(a, b)];
        let (ca, cb) = (prelim.centers[a], prelim.centers[b]);
        let merged = !significant(field, ca, &s, z) || !significant(field, cb, &s, z);
        merges.push(MergeRecord { a, b, saddle: s, merged });
        if !merged {
            continue;
        }
        let (keep, gone) = if field.beats(ca, cb) { (a, b) } else { (b, a) };
        for r in rep.iter_mut() {
            if *r == gone {
                *r = keep;
            }
        }
        table.remove(&(a, b));
        let moved: Vec<((usize, usize), Saddle)> = table
            .iter()
            .filter(|(&(x, y), _)| x == gone || y == gone)
            .map(|(&k, &s)| (k, s))
            .collect();
        for (k, s) in moved {
            table.remove(&k);
            pending.remove(&k);
            let other = if k.0 == gone { k.1 } else { k.0 };
            let nk = (keep.min(other), keep.max(other));
            let replace = match table.get(&nk) {
                Some(old) => field.beats(s.voxel, old.voxel),
                None => true,
            };
            if replace {
                table.insert(nk, s);
                pending.insert(nk);
            }
        }
    }

    // compact numbering, ordered like the surviving centres
    let survivors: Vec<usize> = (0..nc).filter(|&c| rep[c] == c).collect();
    let mut new_id = vec![usize::MAX; nc];
    for (k, &c) in survivors.iter().enumerate() {
        new_id[c] = k;
    }
    let labels = prelim
        .labels
        .iter()
        .map(|&l| if l < 0 { -1 } else { new_id[rep[l as usize]] as i32 })
        .collect();
    let saddle_table = table
        .into_iter()
        .map(|((x, y), s)| {
            let (p, q) = (new_id[x], new_id[y]);
            ((p.min(q), p.max(q)), s)
        })
        .collect();
    SegmentationMap {
        dims: field.dims,
        labels,
        centers: survivors.iter().map(|&c| prelim.centers[c]).collect(),
        saddle_table,
        merges,
        z,
        noise_std: field.noise_std,
        degenerate: prelim.degenerate,
        g: field.g.clone(),
        halo,
    }
}

impl SegmentationMap {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    /// Highest saddle `g` of each cluster, `-∞` for isolated clusters.
    pub fn border_g(&self) -> Vec<f64> {
        let mut b = vec![f64::NEG_INFINITY; self.centers.len()];
        for (&(x, y), s) in &self.saddle_table {
            b[x] = b[x].max(s.g);
            b[y] = b[y].max(s.g);
        }
        b
    }

    /// Labels after halo demotion.
    pub fn final_labels(&self) -> Vec<i32> {
        if !self.halo {
            return self.labels.clone();
        }
        let border = self.border_g();
        self.labels
            .iter()
            .zip(&self.g)
            .map(|(&l, &g)| if l >= 0 && g < border[l as usize] { -1 } else { l })
            .collect()
    }

    /// Text report: centres, saddles and merge decisions.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "clusters {} z {} noise_std {:.6} degenerate {}",
            self.n_clusters(),
            self.z,
            self.noise_std,
            self.degenerate
        );
        for (c, &v) in self.centers.iter().enumerate() {
            let (x, y, zz) = self.dims.coords(v);
            let _ = writeln!(s, "center {c} voxel ({x},{y},{zz}) g {:.6}", self.g[v]);
        }
        for (&(a, b), sd) in &self.saddle_table {
            let _ = writeln!(s, "saddle {a} {b} log_rho {:.6} zeta {:.6}", sd.log_rho, sd.zeta);
        }
        for m in &self.merges {
            let _ = writeln!(
                s,
                "pair {} {} saddle_log_rho {:.6} {}",
                m.a,
                m.b,
                m.saddle.log_rho,
                if m.merged { "merged" } else { "kept" }
            );
        }
        s
    }
}

/// Binary anomaly mask: all surviving clusters are 1, halo is 0.
pub fn finalize(map: &SegmentationMap) -> Vec<u8> {
    map.final_labels().iter().map(|&l| (l >= 0) as u8).collect()
}

/// Full segmentation of one block.
pub fn segment_block(block: &[f64], dims: BlockDims, params: &DpaParams, n_sources: usize) -> Result<SegmentationMap> {
    let field = make_density_field(block, dims, params)?;
    let prelim = find_centers(&field);
    if prelim.degenerate {
        log::warn!("flat density field: single degenerate cluster");
    }
    let saddles = find_saddles(&field, &prelim.labels);
    Ok(merge_clusters(
        &field,
        &prelim,
        &saddles,
        params.z_for_sources(n_sources),
        params.halo,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k_hat: usize) -> DpaParams {
        DpaParams {
            k_hat,
            background_factor: 0.0,
            ..Default::default()
        }
    }

    fn bumps(dims: BlockDims, peaks: &[(f64, f64, f64, f64)], floor: f64, width: f64) -> Vec<f64> {
        (0..dims.len())
            .map(|i| {
                let (x, y, _) = dims.coords(i);
                floor
                    + peaks
                        .iter()
                        .map(|&(px, py, h, _)| {
                            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                            h * (-d2 / (2.0 * width * width)).exp()
                        })
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn uniform_block_has_equal_g_and_one_cluster() {
        let dims = BlockDims::new(6, 6, 2);
        let field = make_density_field(&vec![0.2; 72], dims, &params(10)).unwrap();
        assert!(field.g.iter().all(|&g| g == field.g[0]));
        let pre = find_centers(&field);
        assert_eq!(pre.centers, vec![0]);
        assert!(pre.degenerate);
    }

    #[test]
    fn two_bumps_two_centres() {
        let dims = BlockDims::new(16, 16, 3);
        let block = bumps(dims, &[(4.0, 4.0, 0.3, 0.0), (11.0, 12.0, 0.25, 0.0)], 0.1, 1.5);
        let field = make_density_field(&block, dims, &params(20)).unwrap();
        let pre = find_centers(&field);
        assert_eq!(pre.centers.len(), 2);
        let c: Vec<(usize, usize)> = pre.centers.iter().map(|&v| {
            let (x, y, _) = dims.coords(v);
            (x, y)
        }).collect();
        assert_eq!(c, vec![(4, 4), (11, 12)]);
        // all three layers tie at the peak; the lowest index wins
        assert_eq!(dims.coords(pre.centers[0]).2, 0);
    }

    #[test]
    fn ramp_has_single_centre_at_max() {
        let dims = BlockDims::new(10, 10, 2);
        let block: Vec<f64> = (0..200).map(|i| 0.1 + i as f64 * 1e-3).collect();
        let field = make_density_field(&block, dims, &params(15)).unwrap();
        let pre = find_centers(&field);
        assert_eq!(pre.centers, vec![199]);
        assert!(pre.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn saddle_sits_on_the_ridge_minimum() {
        // two peaks along x joined by a ridge
        let dims = BlockDims::new(21, 7, 1);
        let block: Vec<f64> = (0..dims.len())
            .map(|i| {
                let (x, y, _) = dims.coords(i);
                let ridge = 0.2 + 0.1 * ((x as f64 - 10.0) / 5.0).powi(2).min(1.0);
                ridge * (-((y as f64 - 3.0).powi(2)) / 4.0).exp()
            })
            .collect();
        let field = make_density_field(&block, dims, &params(6)).unwrap();
        let pre = find_centers(&field);
        assert_eq!(pre.centers.len(), 2);
        let saddles = find_saddles(&field, &pre.labels);
        assert_eq!(saddles.len(), 1);
        let s = saddles[&(0, 1)];
        let (x, y, _) = dims.coords(s.voxel);
        assert_eq!(y, 3);
        assert!((9..=11).contains(&x), "saddle at x = {x}");
    }

    #[test]
    fn single_cluster_has_no_saddles() {
        let dims = BlockDims::new(8, 8, 1);
        let block = bumps(dims, &[(4.0, 4.0, 0.3, 0.0)], 0.1, 2.0);
        let field = make_density_field(&block, dims, &params(10)).unwrap();
        let pre = find_centers(&field);
        assert!(find_saddles(&field, &pre.labels).is_empty());
    }

    #[test]
    fn distant_clusters_have_no_saddle() {
        // two bumps separated by background
        let dims = BlockDims::new(30, 5, 1);
        let block: Vec<f64> = (0..dims.len())
            .map(|i| {
                let (x, _, _) = dims.coords(i);
                if x < 5 || x >= 25 {
                    0.3 - 0.01 * (x as f64 - if x < 5 { 2.0 } else { 27.0 }).abs()
                } else {
                    0.0
                }
            })
            .collect();
        let p = DpaParams {
            k_hat: 5,
            background_factor: 2.0,
            background_radius: 1,
            ..Default::default()
        };
        let field = make_density_field(&block, dims, &p).unwrap();
        let pre = find_centers(&field);
        assert_eq!(pre.centers.len(), 2);
        assert!(find_saddles(&field, &pre.labels).is_empty());
    }

    /// Field with two flat-topped clusters and a controlled saddle.
    fn gap_field(peak_log_gap: f64, zeta: f64) -> (DensityField, Preliminary, SaddleTable) {
        let dims = BlockDims::new(7, 1, 1);
        let saddle_rho = 0.1f64;
        let peak = saddle_rho * peak_log_gap.exp();
        let vals = [0.06, peak, saddle_rho, 0.09, saddle_rho, peak, 0.06];
        let p = DpaParams {
            k_hat: 2,
            background_factor: 0.0,
            zeta_mode: ZetaMode::Constant,
            noise_std: zeta * 0.033,
            ..Default::default()
        };
        let field = make_density_field(&vals, dims, &p).unwrap();
        let pre = find_centers(&field);
        let s = find_saddles(&field, &pre.labels);
        (field, pre, s)
    }

    #[test]
    fn merge_threshold_is_analytic() {
        // log gap 0.5, ζ_c + ζ_s = 0.3 → merged iff Z > 5/3
        let (field, pre, s) = gap_field(0.5, 0.15);
        assert_eq!(pre.centers, vec![1, 5]);
        assert_eq!(s.len(), 1);
        assert_eq!(dims_of(&field, s[&(0, 1)].voxel), 4);
        assert!((s[&(0, 1)].log_rho - 0.1f64.ln()).abs() < 1e-15);
        let below = merge_clusters(&field, &pre, &s, 5.0 / 3.0 - 1e-3, true);
        let above = merge_clusters(&field, &pre, &s, 5.0 / 3.0 + 1e-3, true);
        assert_eq!(below.n_clusters(), 2);
        assert_eq!(above.n_clusters(), 1);
    }

    fn dims_of(field: &DensityField, v: usize) -> usize {
        field.dims.coords(v).0
    }

    #[test]
    fn zero_z_never_merges() {
        let (field, pre, s) = gap_field(0.01, 0.5);
        assert_eq!(merge_clusters(&field, &pre, &s, 0.0, true).n_clusters(), 2);
    }

    #[test]
    fn noise_estimated_from_background() {
        // a bright disk on a noisy background
        let dims = BlockDims::new(40, 40, 2);
        let block: Vec<f64> = (0..dims.len())
            .map(|i| {
                let (x, y, _) = dims.coords(i);
                let r2 = (x as f64 - 20.0).powi(2) + (y as f64 - 20.0).powi(2);
                let jitter = if (x + y) % 2 == 0 { 0.01 } else { -0.01 };
                if r2 < 64.0 { 0.3 } else { jitter }
            })
            .collect();
        let p = DpaParams::default();
        let f = make_density_field(&block, dims, &p).unwrap();
        assert!((f.noise_std - 0.01).abs() < 1e-3, "{}", f.noise_std);
        let fixed = make_density_field(&block, dims, &DpaParams { estimate_noise: false, ..p }).unwrap();
        assert_eq!(fixed.noise_std, 0.003);
        // a clean background falls back to the configured floor
        let clean: Vec<f64> = block.iter().map(|&v| if v > 0.1 { v } else { 0.0 }).collect();
        assert_eq!(make_density_field(&clean, dims, &p).unwrap().noise_std, 0.003);
    }

    #[test]
    fn z_rule_follows_source_count() {
        let p = DpaParams::default();
        assert_eq!(p.z_for_sources(1), 3.4);
        assert_eq!(p.z_for_sources(5), 3.4);
        assert_eq!(p.z_for_sources(7), 2.4);
        assert_eq!(p.k_hat, 200);
        assert_eq!((p.noise_mean, p.noise_std), (0.033, 0.003));
    }

    #[test]
    fn finalize_empty_and_idempotent() {
        let dims = BlockDims::new(4, 4, 1);
        let p = DpaParams::default();
        let map = segment_block(&vec![0.0; 16], dims, &p, 3).unwrap();
        assert_eq!(finalize(&map), vec![0; 16]);
        let block = bumps(BlockDims::new(12, 12, 2), &[(3.0, 3.0, 0.3, 0.0), (8.0, 8.0, 0.3, 0.0)], 0.1, 1.0);
        let map = segment_block(&block, BlockDims::new(12, 12, 2), &params(10), 3).unwrap();
        assert_eq!(finalize(&map), finalize(&map.clone()));
    }

    #[test]
    fn halo_removes_voxels_below_the_border() {
        let dims = BlockDims::new(16, 16, 1);
        let block = bumps(dims, &[(4.0, 4.0, 0.3, 0.0), (12.0, 12.0, 0.3, 0.0)], 0.05, 1.5);
        let mut p = params(12);
        p.z = Some(1.0);
        let map = segment_block(&block, dims, &p, 3).unwrap();
        assert_eq!(map.n_clusters(), 2);
        let with_halo = finalize(&map);
        let no_halo = finalize(&SegmentationMap { halo: false, ..map.clone() });
        assert!(no_halo.iter().all(|&v| v == 1));
        let kept = with_halo.iter().filter(|&&v| v == 1).count();
        assert!(kept > 2 && kept < 256);
        assert_eq!(with_halo[dims.index(4, 4, 0)], 1);
        assert_eq!(with_halo[dims.index(0, 15, 0)], 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn block_strategy() -> impl Strategy<Value = (BlockDims, Vec<f64>)> {
            (3usize..8, 3usize..8, 1usize..3).prop_flat_map(|(nx, ny, nz)| {
                let dims = BlockDims::new(nx, ny, nz);
                // coarse values so ties occur
                (Just(dims), prop::collection::vec((0u32..12).prop_map(|v| 0.02 + 0.03 * v as f64), dims.len()))
            })
        }

        fn brute_centres(field: &DensityField) -> Vec<usize> {
            let n = field.dims.len();
            let nbrs = |i: usize| {
                let mut all: Vec<usize> = (0..n).filter(|&j| j != i && field.active[j]).collect();
                all.sort_by_key(|&j| field.dims.key(i, j));
                all.truncate(field.k_hat);
                all
            };
            let cand: Vec<bool> = (0..n).map(|i| field.active[i] && nbrs(i).iter().all(|&j| field.beats(i, j))).collect();
            let mut c: Vec<usize> = (0..n)
                .filter(|&i| cand[i])
                .filter(|&i| !(0..n).any(|j| field.active[j] && field.beats(j, i) && nbrs(j).contains(&i)))
                .collect();
            c.sort_by(|&a, &b| field.g[b].total_cmp(&field.g[a]).then(a.cmp(&b)));
            c
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn centres_match_brute_force((dims, block) in block_strategy(), k in 1usize..10, bg in prop::bool::ANY) {
                let p = DpaParams { k_hat: k, background_factor: if bg { 2.0 } else { 0.0 }, background_radius: 1, ..Default::default() };
                let field = make_density_field(&block, dims, &p).unwrap();
                let pre = find_centers(&field);
                prop_assert_eq!(&pre.centers, &brute_centres(&field));
            }

            #[test]
            fn labels_partition_active_voxels((dims, block) in block_strategy(), k in 1usize..10, z in 0.0f64..5.0) {
                let p = DpaParams { k_hat: k, z: Some(z), background_radius: 1, ..Default::default() };
                let map = segment_block(&block, dims, &p, 3).unwrap();
                let field = make_density_field(&block, dims, &p).unwrap();
                for (i, &l) in map.labels.iter().enumerate() {
                    prop_assert_eq!(l >= 0, field.active[i]);
                    prop_assert!(l < map.n_clusters() as i32);
                }
                for (c, &v) in map.centers.iter().enumerate() {
                    prop_assert_eq!(map.labels[v], c as i32);
                }
                let mask = finalize(&map);
                prop_assert!(mask.iter().all(|&m| m <= 1));
                // the halo never removes a centre
                for &v in &map.centers {
                    prop_assert_eq!(mask[v], 1);
                }
            }

            #[test]
            fn no_cluster_count_growth_with_z((dims, block) in block_strategy(), k in 1usize..10, z in 0.0f64..4.0, dz in 0.0f64..4.0) {
                let p = DpaParams { k_hat: k, background_factor: 0.0, ..Default::default() };
                let field = make_density_field(&block, dims, &p).unwrap();
                let pre = find_centers(&field);
                let s = find_saddles(&field, &pre.labels);
                let lo = merge_clusters(&field, &pre, &s, z, true).n_clusters();
                let hi = merge_clusters(&field, &pre, &s, z + dz, true).n_clusters();
                prop_assert!(hi <= lo, "Z {} → {}, Z {} → {}", z, lo, z + dz, hi);
            }

            #[test]
            fn constant_zeta_is_scale_invariant((dims, block) in block_strategy(), k in 1usize..10, scale in 1.0f64..4.0) {
                let p = DpaParams { k_hat: k, background_factor: 0.0, zeta_mode: ZetaMode::Constant, noise_mean: 0.01, ..Default::default() };
                let a = segment_block(&block, dims, &p, 3).unwrap();
                let scaled: Vec<f64> = block.iter().map(|v| v * scale).collect();
                let b = segment_block(&scaled, dims, &p, 3).unwrap();
                prop_assert_eq!(a.centers, b.centers);
                prop_assert_eq!(a.labels, b.labels);
            }
        }
    }
}
