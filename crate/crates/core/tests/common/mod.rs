#![allow(dead_code)]

pub mod dpa_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqct::dpa::BlockDims;

/// Smooth random field: a few Gaussian bumps on a floor plus jitter.
pub fn random_field(dims: BlockDims, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(2..7))
        .map(|_| {
            (
                rng.random_range(0.0..dims.nx as f64),
                rng.random_range(0.0..dims.ny as f64),
                rng.random_range(0.0..dims.nz as f64),
                rng.random_range(0.05..0.3),
                rng.random_range(1.0..3.0),
            )
        })
        .collect();
    (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let mut v = 0.1 + rng.random_range(-0.01..0.01);
            for &(bx, by, bz, h, w) in &bumps {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2) + (z as f64 - bz).powi(2);
                v += h * (-d2 / (2.0 * w * w)).exp();
            }
            // coarse quantization produces exact ties
            (v * 400.0).round() / 400.0
        })
        .collect()
}
