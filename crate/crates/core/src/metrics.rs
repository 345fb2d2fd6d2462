//! Image and mask comparison scores.

use std::fmt;

use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in decibels. Identical images score
/// [`Psnr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    /// Value in dB, with `f64::INFINITY` for the identical case.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn check_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context,
            expected: b,
            actual: a,
        });
    }
    Ok(())
}

/// `10 log10(peak² / MSE)`; `peak` defaults to the maximum of `reference`.
pub fn psnr(x: &[f64], reference: &[f64], peak: Option<f64>) -> Result<Psnr> {
    check_len("psnr image vs reference", x.len(), reference.len())?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    let peak = peak.unwrap_or_else(|| reference.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::InvalidArgument(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (peak * peak / mse).log10()))
}

fn check_binary(mask: &[u8]) -> Result<()> {
    match mask.iter().position(|&v| v > 1) {
        Some(index) => Err(Error::NonBinaryMask {
            index,
            value: mask[index],
        }),
        None => Ok(()),
    }
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks agree perfectly.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    check_len("dice masks", a.len(), b.len())?;
    check_binary(a)?;
    check_binary(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x & y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// The square of [`dice`].
pub fn dice_squared(a: &[u8], b: &[u8]) -> Result<f64> {
    dice(a, b).map(|d| d * d)
}

/// Mean of `values[center - half_width ..= center + half_width]`.
pub fn block_average(values: &[f64], center: usize, half_width: usize) -> Result<f64> {
    if center < half_width || center + half_width >= values.len() {
        return Err(Error::InvalidArgument(format!(
            "window {center}±{half_width} outside 0..{}",
            values.len()
        )));
    }
    let w = &values[center - half_width..=center + half_width];
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}
