//! Slice stacks and their on-disk formats.
//!
//! Volumes are stored as raw little-endian `f32`, masks as raw `u8` and
//! sinograms as raw `f64`, each next to a `<file>.meta` TOML sidecar that
//! records the shape, spacing, seed and the resolved run configuration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SliceAngleSet;
use crate::phantom::ScanSlice;

/// Stack of `n × n` slices, slice-major, pixel `iy * n + ix` within a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub n: usize,
    pub n_slices: usize,
    pub pixel_size: f64,
    pub slice_spacing: f64,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(n: usize, n_slices: usize, pixel_size: f64, slice_spacing: f64) -> Self {
        Self {
            n,
            n_slices,
            pixel_size,
            slice_spacing,
            data: vec![0.0; n * n * n_slices],
        }
    }

    pub fn from_slices(n: usize, pixel_size: f64, slice_spacing: f64, slices: Vec<Vec<f64>>) -> Result<Self> {
        let n_slices = slices.len();
        let mut data = Vec::with_capacity(n * n * n_slices);
        for s in slices {
            if s.len() != n * n {
                return Err(Error::DimensionMismatch {
                    context: "slice length",
                    expected: n * n,
                    actual: s.len(),
                });
            }
            data.extend(s);
        }
        Ok(Self {
            n,
            n_slices,
            pixel_size,
            slice_spacing,
            data,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.n * self.n
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let m = self.slice_len();
        &self.data[k * m..(k + 1) * m]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let m = self.slice_len();
        &mut self.data[k * m..(k + 1) * m]
    }

    /// Consecutive slices `start..end` as one contiguous block.
    pub fn block(&self, start: usize, end: usize) -> &[f64] {
        let m = self.slice_len();
        &self.data[start * m..end * m]
    }
}

/// Binary per-voxel labels with the same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub n: usize,
    pub n_slices: usize,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn slice(&self, k: usize) -> &[u8] {
        let m = self.n * self.n;
        &self.data[k * m..(k + 1) * m]
    }

    pub fn block(&self, start: usize, end: usize) -> &[u8] {
        let m = self.n * self.n;
        &self.data[start * m..end * m]
    }
}

/// Sidecar contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// `[nx, ny, nz]`, or `[n_detectors, n_sources, n_slices]` for sinograms.
    pub dims: [usize; 3],
    pub dtype: String,
    #[serde(default)]
    pub spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub levels: BTreeMap<String, f64>,
    /// Source angles per slice, sinograms only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub angles: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Table>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_metadata(path: &Path, meta: &Metadata) -> Result<()> {
    let side = sidecar_path(path);
    let text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: side,
        reason: e.to_string(),
    })
}

fn check_meta(path: &Path, meta: &Metadata, dtype: &str, elem: usize, len: usize) -> Result<()> {
    if meta.dtype != dtype {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected dtype {dtype}, sidecar says {}", meta.dtype),
        });
    }
    let expected = meta.dims.iter().product::<usize>() * elem;
    if len != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("file has {len} bytes, sidecar shape needs {expected}"),
        });
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: impl Iterator<Item = u8>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for b in bytes {
        w.write_all(&[b]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Write `vol` as raw little-endian `f32`. `meta.dims`, `dtype` and
/// `spacing` are filled in from the volume.
pub fn write_volume(path: &Path, vol: &Volume, mut meta: Metadata) -> Result<()> {
    meta.dims = [vol.n, vol.n, vol.n_slices];
    meta.dtype = "f32".into();
    meta.spacing = [vol.pixel_size, vol.pixel_size, vol.slice_spacing];
    write_bytes(path, vol.data.iter().flat_map(|&v| (v as f32).to_le_bytes()))?;
    write_metadata(path, &meta)
}

pub fn read_volume(path: &Path) -> Result<(Volume, Metadata)> {
    let meta = read_metadata(path)?;
    let bytes = read_all(path)?;
    check_meta(path, &meta, "f32", 4, bytes.len())?;
    if meta.dims[0] != meta.dims[1] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "only square slices are supported".into(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((
        Volume {
            n: meta.dims[0],
            n_slices: meta.dims[2],
            pixel_size: meta.spacing[0],
            slice_spacing: meta.spacing[2],
            data,
        },
        meta,
    ))
}

pub fn write_mask(path: &Path, mask: &LabelVolume, mut meta: Metadata) -> Result<()> {
    meta.dims = [mask.n, mask.n, mask.n_slices];
    meta.dtype = "u8".into();
    write_bytes(path, mask.data.iter().copied())?;
    write_metadata(path, &meta)
}

pub fn read_mask(path: &Path) -> Result<(LabelVolume, Metadata)> {
    let meta = read_metadata(path)?;
    let data = read_all(path)?;
    check_meta(path, &meta, "u8", 1, data.len())?;
    Ok((
        LabelVolume {
            n: meta.dims[0],
            n_slices: meta.dims[2],
            data,
        },
        meta,
    ))
}

/// Write sinograms as raw `f64`, one slice after another; the sidecar holds
/// every slice's source angles.
pub fn write_scan(path: &Path, scans: &[ScanSlice], n_detectors: usize, mut meta: Metadata) -> Result<()> {
    let n_sources = scans.first().map_or(0, |s| s.angles.len());
    for s in scans {
        if s.angles.len() != n_sources || s.sinogram.len() != n_sources * n_detectors {
            return Err(Error::DimensionMismatch {
                context: "sinogram shape",
                expected: n_sources * n_detectors,
                actual: s.sinogram.len(),
            });
        }
    }
    meta.dims = [n_detectors, n_sources, scans.len()];
    meta.dtype = "f64".into();
    meta.angles = scans.iter().map(|s| s.angles.angles_deg.clone()).collect();
    write_bytes(
        path,
        scans.iter().flat_map(|s| s.sinogram.iter().flat_map(|v| v.to_le_bytes())),
    )?;
    write_metadata(path, &meta)
}

pub fn read_scan(path: &Path) -> Result<(Vec<ScanSlice>, Metadata)> {
    let meta = read_metadata(path)?;
    let bytes = read_all(path)?;
    check_meta(path, &meta, "f64", 8, bytes.len())?;
    let [nd, ns, nk] = meta.dims;
    if meta.angles.len() != nk || meta.angles.iter().any(|a| a.len() != ns) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "angle table does not match sinogram shape".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let scans = (0..nk)
        .map(|k| {
            Ok(ScanSlice {
                angles: SliceAngleSet::new(k, meta.angles[k].clone())?,
                sinogram: values[k * nd * ns..(k + 1) * nd * ns].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scans, meta))
}

/// Binary 8-bit portable graymap of one `n × n` slice, `lo..hi` mapped to
/// `0..255`. The first image row is the top of the slice (largest `y`).
pub fn write_pgm(path: &Path, slice: &[f64], n: usize, lo: f64, hi: f64) -> Result<()> {
    if slice.len() != n * n {
        return Err(Error::DimensionMismatch {
            context: "pgm slice",
            expected: n * n,
            actual: slice.len(),
        });
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = format!("P5\n{n} {n}\n255\n").into_bytes();
    for iy in (0..n).rev() {
        for ix in 0..n {
            let v = ((slice[iy * n + ix] - lo) / span).clamp(0.0, 1.0);
            buf.push((v * 255.0).round() as u8);
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let vol = Volume::from_slices(2, 1.5, 2.0, vec![vec![0.0, 0.25, 0.5, 1.0], vec![2.0; 4]]).unwrap();
        let mut meta = Metadata {
            seed: Some(9),
            ..Default::default()
        };
        meta.levels.insert("wood".into(), 0.2);
        write_volume(&path, &vol, meta).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        let (back, meta) = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        assert_eq!(meta.seed, Some(9));
        assert_eq!(meta.dims, [2, 2, 2]);
        assert_eq!(meta.levels["wood"], 0.2);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let vol = Volume::zeros(3, 2, 1.0, 1.0);
        write_volume(&path, &vol, Metadata::default()).unwrap();
        std::fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn scan_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.raw");
        let scans: Vec<ScanSlice> = (0..3)
            .map(|k| ScanSlice {
                angles: SliceAngleSet::equispaced(k, 2, 10.0 * k as f64).unwrap(),
                sinogram: (0..8).map(|i| (i + k) as f64 * 0.1).collect(),
            })
            .collect();
        write_scan(&path, &scans, 4, Metadata::default()).unwrap();
        let (back, _) = read_scan(&path).unwrap();
        assert_eq!(back, scans);
    }

    #[test]
    fn pgm_header_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        write_pgm(&path, &[0.0, 0.0, 1.0, 0.5], 2, 0.0, 1.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[255, 128, 0, 0]);
    }
}
