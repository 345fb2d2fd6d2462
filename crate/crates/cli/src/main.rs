//! `seqct`: batch driver for the sequential sparse-angle CT pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use seqct::config::RunConfig;
use seqct::dpa::{finalize, segment_block, BlockDims};
use seqct::experiment::{metrics_csv, summary_csv, Experiment, Method};
use seqct::geometry::Scheme;
use seqct::volume::{
    read_scan, read_volume, write_mask, write_metadata, write_pgm, write_scan, write_volume, LabelVolume, Metadata,
    Volume,
};

#[derive(Parser, Debug)]
#[command(name = "seqct", version, about = "Sequential sparse-angle CT: Kalman reconstruction and density-peak segmentation")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for the scan noise and the random schedule.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the reduced rank of the prior basis.
    #[arg(long, global = true)]
    reduced_rank: Option<usize>,
    /// Rotation scheme: fixed, one-degree, quarter-delta, random-uniform.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    /// Sources per slice.
    #[arg(long, global = true)]
    sources: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic log and its knot labels.
    Phantom,
    /// Simulate a sparse-angle scan of the phantom.
    Scan {
        /// Existing phantom volume; generated from the config otherwise.
        #[arg(long)]
        phantom: Option<PathBuf>,
    },
    /// Reconstruct a scan.
    Reconstruct {
        #[arg(long, value_enum, default_value_t = MethodArg::Drkf)]
        method: MethodArg,
        /// Scan file; simulated from the config when omitted. Ignored by
        /// `reference`, which always rescans the evaluation block.
        #[arg(long)]
        scan: Option<PathBuf>,
    },
    /// DPA segmentation of a reconstruction, block by block.
    Segment {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a reconstruction against the dense-angle reference.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Every configured scheme × source count.
    Sweep,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MethodArg {
    Drkf,
    Baseline,
    Reference,
}

impl GlobalOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        if let Some(r) = self.reduced_rank {
            cfg.prior.rank = Some(r);
        }
        if let Some(s) = self.scheme {
            cfg.schedule.scheme = s;
            cfg.sweep.schemes = vec![s];
        }
        if let Some(n) = self.sources {
            cfg.schedule.n_sources = n;
            cfg.sweep.sources = vec![n];
        }
        cfg.validate().context("resolved config")?;
        Ok(cfg)
    }
}

fn meta_for(cfg: &RunConfig) -> Metadata {
    Metadata {
        seed: Some(cfg.scan.seed),
        config: Some(cfg.to_table()),
        ..Default::default()
    }
}

fn write_table(path: &Path, text: &str, cfg: &RunConfig) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    let meta = Metadata {
        dtype: "csv".into(),
        ..meta_for(cfg)
    };
    write_metadata(path, &meta)?;
    Ok(())
}

/// Raw volume plus a preview of its middle slice.
fn write_with_preview(path: &Path, vol: &Volume, meta: Metadata) -> Result<()> {
    write_volume(path, vol, meta)?;
    let mid = vol.slice(vol.n_slices / 2);
    let (lo, hi) = mid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    write_pgm(&path.with_extension("pgm"), mid, vol.n, lo.min(0.0), hi)?;
    Ok(())
}

fn to_slices(vol: &Volume) -> Vec<Vec<f64>> {
    (0..vol.n_slices).map(|k| vol.slice(k).to_vec()).collect()
}

fn phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = Experiment::prepare(cfg.clone())?;
    let mut meta = meta_for(cfg);
    meta.seed = Some(cfg.phantom.seed);
    meta.levels = [
        ("wood", cfg.phantom.wood_level),
        ("sapwood", cfg.phantom.sapwood_level),
        ("knot", cfg.phantom.knot_level),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_with_preview(&out.join("phantom.raw"), &e.truth, meta.clone())?;
    write_mask(&out.join("labels.raw"), &e.truth_labels, meta)?;
    log::info!("wrote phantom to {}", out.display());
    Ok(())
}

fn scan(cfg: &RunConfig, out: &Path, phantom: Option<&Path>) -> Result<()> {
    let mut e = Experiment::prepare(cfg.clone())?;
    if let Some(p) = phantom {
        let (vol, _) = read_volume(p).with_context(|| format!("reading phantom {}", p.display()))?;
        if vol.n != e.grid.n {
            bail!("phantom is {}² but the config grid is {}²", vol.n, e.grid.n);
        }
        e.truth = vol;
    }
    let scans = e.scan(&cfg.schedule.schedule())?;
    write_scan(&out.join("scan.raw"), &scans, cfg.geometry.n_detectors, meta_for(cfg))?;
    log::info!("wrote {} sinograms", scans.len());
    Ok(())
}

fn reconstruct(cfg: &RunConfig, out: &Path, method: MethodArg, scan: Option<&Path>) -> Result<PathBuf> {
    let e = Experiment::prepare(cfg.clone())?;
    let (name, slices) = match method {
        MethodArg::Reference => ("reference", e.reference_slices(cfg.metrics.block())?),
        m => {
            let scans = match scan {
                Some(p) => read_scan(p).with_context(|| format!("reading scan {}", p.display()))?.0,
                None => e.scan(&cfg.schedule.schedule())?,
            };
            let (name, method) = if m == MethodArg::Drkf {
                ("drkf", Method::Drkf)
            } else {
                ("baseline", Method::Baseline)
            };
            (name, e.reconstruct(method, &scans)?)
        }
    };
    let vol = Volume::from_slices(e.grid.n, e.grid.pixel_size, e.truth.slice_spacing, slices)?;
    let path = out.join(format!("recon_{name}.raw"));
    write_with_preview(&path, &vol, meta_for(cfg))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn segment(cfg: &RunConfig, out: &Path, input: &Path) -> Result<()> {
    let (vol, _) = read_volume(input).with_context(|| format!("reading {}", input.display()))?;
    let block_len = 2 * cfg.metrics.block_half_width + 1;
    let m = vol.n * vol.n;
    let starts: Vec<usize> = (0..vol.n_slices).step_by(block_len).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let end = (s + block_len).min(vol.n_slices);
            let dims = BlockDims::new(vol.n, vol.n, end - s);
            segment_block(vol.block(s, end), dims, &cfg.dpa, cfg.schedule.n_sources)
                .with_context(|| format!("block {s}..{end}"))
                .map(|map| (s, end, finalize(&map), map.report()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(vol.n_slices * m);
    let mut report = String::new();
    for (s, end, mask, text) in parts {
        data.extend_from_slice(&mask);
        let _ = writeln!(report, "# slices {s}..{end}\n{text}");
    }
    let mask = LabelVolume {
        n: vol.n,
        n_slices: vol.n_slices,
        data,
    };
    write_mask(&out.join("mask.raw"), &mask, meta_for(cfg))?;
    let report_path = out.join("clusters.txt");
    fs::write(&report_path, report).with_context(|| format!("writing {}", report_path.display()))?;
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Path, input: &Path) -> Result<()> {
    let (vol, _) = read_volume(input).with_context(|| format!("reading {}", input.display()))?;
    let e = Experiment::prepare(cfg.clone())?;
    if vol.n != e.grid.n {
        bail!("reconstruction is {}² but the config grid is {}²", vol.n, e.grid.n);
    }
    let cell = e.evaluate(cfg.schedule.scheme, cfg.schedule.n_sources, &to_slices(&vol))?;
    let cells = [cell];
    write_table(&out.join("metrics.csv"), &metrics_csv(&cells), cfg)?;
    write_table(&out.join("summary.csv"), &summary_csv(&cells), cfg)?;
    println!("{}", summary_csv(&cells).trim_end());
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = Experiment::prepare(cfg.clone())?;
    let cells = e.sweep()?;
    write_table(&out.join("metrics.csv"), &metrics_csv(&cells), cfg)?;
    write_table(&out.join("summary.csv"), &summary_csv(&cells), cfg)?;
    print!("{}", summary_csv(&cells));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    if let Some(t) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("thread pool")?;
    }
    let out = &cli.global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Phantom => phantom(&cfg, out).context("phantom"),
        Command::Scan { phantom } => scan(&cfg, out, phantom.as_deref()).context("scan"),
        Command::Reconstruct { method, scan } => reconstruct(&cfg, out, *method, scan.as_deref())
            .map(drop)
            .context("reconstruct"),
        Command::Segment { input } => segment(&cfg, out, input).context("segment"),
        Command::Evaluate { input } => evaluate(&cfg, out, input).context("evaluate"),
        Command::Sweep => sweep(&cfg, out).context("sweep"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
