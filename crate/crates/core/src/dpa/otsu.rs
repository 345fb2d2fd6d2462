//! Multi-level Otsu thresholding.

use crate::error::{Error, Result};

pub const BINS: usize = 256;

/// Histogram of `values` over `BINS` equal bins spanning `[min, max]`.
pub fn histogram(values: &[f64]) -> Option<(Vec<u64>, f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let mut h = vec![0u64; BINS];
    for &v in values {
        h[bin_of(v, lo, hi)] += 1;
    }
    Some((h, lo, hi))
}

fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    (((v - lo) / (hi - lo) * BINS as f64) as usize).min(BINS - 1)
}

/// Threshold bins maximizing the between-class variance of the histogram.
///
/// Returns `n_classes - 1` increasing bin indices `t`; class `m` holds the
/// bins `t[m-1] < b <= t[m]`.
pub fn otsu_thresholds(hist: &[u64], n_classes: usize) -> Result<Vec<usize>> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    let n = hist.len();
    if n_classes > n {
        return Err(Error::InvalidArgument("more classes than histogram bins".into()));
    }
    // prefix sums of weight and first moment (bin centres as values)
    let mut w = vec![0.0; n + 1];
    let mut m = vec![0.0; n + 1];
    for (b, &c) in hist.iter().enumerate() {
        w[b + 1] = w[b] + c as f64;
        m[b + 1] = m[b] + c as f64 * (b as f64 + 0.5);
    }
    // between-class variance up to constants: Σ_classes M²/W
    let term = |a: usize, b: usize| {
        let (ww, mm) = (w[b] - w[a], m[b] - m[a]);
        if ww > 0.0 {
            mm * mm / ww
        } else {
            0.0
        }
    };
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut cuts = Vec::with_capacity(n_classes - 1);
    search(n, n_classes - 1, 0, 0.0, &term, &mut cuts, &mut best);
    Ok(best.1)
}

fn search(
    n: usize,
    remaining: usize,
    start: usize,
    acc: f64,
    term: &dyn Fn(usize, usize) -> f64,
    cuts: &mut Vec<usize>,
    best: &mut (f64, Vec<usize>),
) {
    if remaining == 0 {
        let total = acc + term(start, n);
        if total > best.0 {
            *best = (total, cuts.iter().map(|c| c - 1).collect());
        }
        return;
    }
    // a cut at `c` ends the current class after bin c - 1
    for c in start + 1..=n - remaining {
        cuts.push(c);
        search(n, remaining - 1, c, acc + term(start, c), term, cuts, best);
        cuts.pop();
    }
}

/// Binary mask of the top class of a multi-level Otsu split of `block`.
/// A constant block yields an all-zero mask.
pub fn multi_otsu(block: &[f64], n_classes: usize) -> Result<Vec<u8>> {
    let Some((hist, lo, hi)) = histogram(block) else {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
        }
        return Ok(vec![0; block.len()]);
    };
    let t = otsu_thresholds(&hist, n_classes)?;
    let top = *t.last().expect("at least one threshold");
    Ok(block.iter().map(|&v| (bin_of(v, lo, hi) > top) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_valued_image() {
        let img: Vec<f64> = (0..100).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mask = multi_otsu(&img, 2).unwrap();
        for (v, m) in img.iter().zip(&mask) {
            assert_eq!(*m as f64, *v);
        }
    }

    #[test]
    fn constant_block_gives_empty_mask() {
        assert_eq!(multi_otsu(&[0.3; 50], 3).unwrap(), vec![0; 50]);
        assert!(multi_otsu(&[0.3; 50], 1).is_err());
    }

    /// Between-class variance computed straight from the samples.
    fn direct_variance(values: &[f64], lo: f64, hi: f64, t: &[usize]) -> f64 {
        let k = t.len() + 1;
        let mut sums = vec![(0.0, 0.0); k];
        for &v in values {
            let b = bin_of(v, lo, hi);
            let class = t.iter().filter(|&&c| b > c).count();
            sums[class].0 += 1.0;
            sums[class].1 += b as f64 + 0.5;
        }
        let n = values.len() as f64;
        let mu = sums.iter().map(|s| s.1).sum::<f64>() / n;
        sums.iter()
            .filter(|s| s.0 > 0.0)
            .map(|s| s.0 * (s.1 / s.0 - mu).powi(2))
            .sum::<f64>()
            / n
    }

    #[test]
    fn three_gaussian_mixture_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = Vec::new();
        for (mu, sd, count) in [(0.0, 0.03, 3000), (0.2, 0.03, 5000), (0.4, 0.03, 1500)] {
            let d = Normal::new(mu, sd).unwrap();
            v.extend((0..count).map(|_| d.sample(&mut rng)));
        }
        let (hist, lo, hi) = histogram(&v).unwrap();
        let t = otsu_thresholds(&hist, 3).unwrap();
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for a in 0..BINS {
            for b in a + 1..BINS - 1 {
                let s = direct_variance(&v, lo, hi, &[a, b]);
                if s > best.0 {
                    best = (s, (a, b));
                }
            }
        }
        assert!((t[0] as i64 - best.1 .0 as i64).abs() <= 1, "{t:?} vs {:?}", best.1);
        assert!((t[1] as i64 - best.1 .1 as i64).abs() <= 1, "{t:?} vs {:?}", best.1);
    }
}
