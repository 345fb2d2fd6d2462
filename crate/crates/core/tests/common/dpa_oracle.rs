//! Exhaustive reimplementation of the three clustering heuristics, written
//! for clarity over speed.

use std::collections::BTreeSet;

use seqct::dpa::DensityField;

fn key(f: &DensityField, i: usize, j: usize) -> (i64, i64) {
    f.dims.key(i, j)
}

fn beats(f: &DensityField, i: usize, j: usize) -> bool {
    f.g[i] > f.g[j] || (f.g[i] == f.g[j] && i < j)
}

/// The `k̂` nearest active voxels of `i`, by sorting every voxel.
pub fn neighbours(f: &DensityField, i: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..f.dims.len()).filter(|&j| j != i && f.active[j]).collect();
    all.sort_by_key(|&j| key(f, i, j));
    all.truncate(f.k_hat);
    all
}

pub struct Clusters {
    pub centers: Vec<usize>,
    pub labels: Vec<i32>,
}

pub fn centers_and_labels(f: &DensityField) -> Clusters {
    let n = f.dims.len();
    let nbrs: Vec<Vec<usize>> = (0..n).map(|i| if f.active[i] { neighbours(f, i) } else { vec![] }).collect();
    let mut centers: Vec<usize> = (0..n)
        .filter(|&i| f.active[i] && nbrs[i].iter().all(|&j| beats(f, i, j)))
        .filter(|&i| !(0..n).any(|j| f.active[j] && beats(f, j, i) && nbrs[j].contains(&i)))
        .collect();
    centers.sort_by(|&a, &b| if beats(f, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    let mut order: Vec<usize> = (0..n).filter(|&i| f.active[i]).collect();
    order.sort_by(|&a, &b| if beats(f, a, b) { std::cmp::Ordering::Less } else if a == b { std::cmp::Ordering::Equal } else { std::cmp::Ordering::Greater });
    let mut labels = vec![-1i32; n];
    for &i in &order {
        if let Some(c) = centers.iter().position(|&v| v == i) {
            labels[i] = c as i32;
            continue;
        }
        let parent = (0..n)
            .filter(|&j| f.active[j] && beats(f, j, i))
            .min_by_key(|&j| key(f, i, j))
            .expect("higher voxel");
        labels[i] = labels[parent];
    }
    Clusters { centers, labels }
}

/// Boundary points: `(c, c', i)` with `i ∈ c`.
pub fn boundary_points(f: &DensityField, labels: &[i32]) -> Vec<(usize, usize, usize)> {
    let n = f.dims.len();
    let mut out = Vec::new();
    for i in 0..n {
        if labels[i] < 0 {
            continue;
        }
        let c = labels[i];
        let nb = neighbours(f, i);
        let others: BTreeSet<i32> = nb.iter().map(|&j| labels[j]).filter(|&l| l != c && l >= 0).collect();
        for cp in others {
            // nearest point of c' to i, over the whole cluster
            let j = (0..n).filter(|&j| labels[j] == cp).min_by_key(|&j| key(f, i, j)).unwrap();
            if !nb.contains(&j) {
                continue;
            }
            let back = (0..n).filter(|&m| labels[m] == c).min_by_key(|&m| key(f, j, m)).unwrap();
            if back == i {
                out.push((c as usize, cp as usize, i));
            }
        }
    }
    out
}

/// Merged pairs of representatives, in merge order, and the final partition
/// as sets of preliminary cluster ids.
pub fn merges(
    f: &DensityField,
    cl: &Clusters,
    bps: &[(usize, usize, usize)],
    z: f64,
) -> (Vec<(usize, usize)>, Vec<BTreeSet<usize>>) {
    let mut parts: Vec<BTreeSet<usize>> = (0..cl.centers.len()).map(|c| BTreeSet::from([c])).collect();
    let mut log = Vec::new();
    loop {
        // saddle of every pair of current parts
        let mut best: Option<(f64, usize, (usize, usize))> = None;
        for a in 0..parts.len() {
            for b in a + 1..parts.len() {
                let s = bps
                    .iter()
                    .filter(|&&(c, cp, _)| {
                        (parts[a].contains(&c) && parts[b].contains(&cp)) || (parts[b].contains(&c) && parts[a].contains(&cp))
                    })
                    .map(|&(_, _, i)| i)
                    .reduce(|x, y| if beats(f, x, y) { x } else { y });
                let Some(s) = s else { continue };
                let ca = cl.centers[*parts[a].first().unwrap()];
                let cb = cl.centers[*parts[b].first().unwrap()];
                let sig = |c: usize| f.log_rho[c] - f.log_rho[s] >= z * (f.zeta[c] + f.zeta[s]);
                if sig(ca) && sig(cb) {
                    continue;
                }
                let pair = (*parts[a].first().unwrap(), *parts[b].first().unwrap());
                let pair = (pair.0.min(pair.1), pair.0.max(pair.1));
                let better = match best {
                    None => true,
                    Some((lr, v, p)) => {
                        f.log_rho[s] > lr || (f.log_rho[s] == lr && (s < v || (s == v && pair < p)))
                    }
                };
                if better {
                    best = Some((f.log_rho[s], s, pair));
                }
            }
        }
        let Some((_, _, (a, b))) = best else { break };
        log.push((a, b));
        let ib = parts.iter().position(|p| p.contains(&b)).unwrap();
        let gone = parts.remove(ib);
        let ia = parts.iter().position(|p| p.contains(&a)).unwrap();
        parts[ia].extend(gone);
    }
    (log, parts)
}
