//! Commands behind the `inrpatch` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use inrpatch_core::checkpoint::Checkpoint;
use inrpatch_core::config::{Mode, RunConfig};
use inrpatch_core::coords::{lattice_points, make_grid, StageId};
use inrpatch_core::data::{save_image, tile, Dataset, Image};
use inrpatch_core::discriminator::DiscParams;
use inrpatch_core::generator::GeneratorParams;
use inrpatch_core::metrics::{pfd, FeatureStats};
use inrpatch_core::profile::{profile, ProfileReport};
use inrpatch_core::tensor::Tensor;
use inrpatch_core::train::{run, TrainObserver, TrainingMetrics, CSV_HEADER};

/// Points per generator call when rendering; bounds tape memory.
const RENDER_CHUNK: usize = 4096;

/// Seed offset for the fixed latents of training-time sample sheets.
const SHEET_SEED_SALT: u64 = 0x005a_17e5;

/// Worker threads for rendering: `INRPATCH_THREADS`, else 1.
pub fn thread_count() -> usize {
    std::env::var("INRPATCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Where on the training-resolution plane a picture is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum View {
    /// The generator's own lattice.
    Native,
    /// Native lattice extended by `margin · N` points on every side.
    Extrapolate { margin: f64 },
    /// Lattice spacing divided by `factor`.
    SuperRes { factor: usize },
}

impl View {
    /// Output side and evaluation points (row-major) for `gen`.
    pub fn points(self, gen: &GeneratorParams) -> Result<(usize, Vec<[f64; 2]>)> {
        let n = gen.density();
        let stride = (gen.resolution / n) as f64;
        Ok(match self {
            View::Native => (n, make_grid(gen.resolution, gen.resolution, n)?.points()),
            View::Extrapolate { margin } => {
                ensure!(
                    margin >= 0.0 && margin.is_finite(),
                    "margin must be a finite value >= 0, got {margin}"
                );
                let pad = (margin * n as f64).round() as usize;
                let side = n + 2 * pad;
                let start = -(pad as f64) * stride;
                (side, lattice_points(start, start, stride, side))
            }
            View::SuperRes { factor } => {
                ensure!(matches!(factor, 2 | 4), "factor must be 2 or 4, got {factor}");
                let side = n * factor;
                (side, lattice_points(0.0, 0.0, stride / factor as f64, side))
            }
        })
    }
}

/// `n` latents drawn from `seed`; shared by every view so pictures line up.
pub fn latents(gen: &GeneratorParams, n: usize, seed: u64) -> Result<Tensor> {
    ensure!(n > 0, "--n must be positive");
    Ok(Tensor::randn(&[n, gen.config.z_dim], seed)?)
}

/// One image per latent row, rendered in point chunks across threads.
pub fn render_view(gen: &GeneratorParams, z: &Tensor, view: View) -> Result<Vec<Image>> {
    let (side, points) = view.points(gen)?;
    let threads = thread_count();
    let z_dim = gen.config.z_dim;
    let mut out = Vec::with_capacity(z.shape()[0]);
    for zr in z.data().chunks_exact(z_dim) {
        let zt = Tensor::from_vec(&[1, z_dim], zr.to_vec())?;
        let chunks: Vec<&[[f64; 2]]> = points.chunks(RENDER_CHUNK).collect();
        let mut parts: Vec<Option<inrpatch_core::Result<Tensor>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, slots) in parts.chunks_mut(chunks.len().div_ceil(threads)).enumerate() {
                let first = w * chunks.len().div_ceil(threads);
                let (chunks, zt) = (&chunks, &zt);
                s.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(gen.render(zt, chunks[first + k]));
                    }
                });
            }
        });
        let mut rows = Vec::with_capacity(points.len() * 3);
        for p in parts {
            rows.extend_from_slice(p.expect("every chunk rendered")?.data());
        }
        out.push(Image::from_rows(side, &rows)?);
    }
    Ok(out)
}

fn save_sheet(path: &Path, images: &[Image]) -> Result<()> {
    save_image(path, &tile(images)?).with_context(|| format!("writing {}", path.display()))
}

/// Renders `n` samples in `view` and writes them as one tiled PNG.
pub fn cmd_view(checkpoint: &Path, view: View, n: usize, seed: u64, out: &Path) -> Result<Vec<Image>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let z = latents(&ckpt.gen, n, seed)?;
    let images = render_view(&ckpt.gen, &z, view)?;
    save_sheet(out, &images)?;
    Ok(images)
}

pub fn cmd_sample(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<Vec<Image>> {
    cmd_view(checkpoint, View::Native, n, seed, out)
}

pub fn cmd_extrapolate(checkpoint: &Path, margin: f64, n: usize, seed: u64, out: &Path) -> Result<Vec<Image>> {
    cmd_view(checkpoint, View::Extrapolate { margin }, n, seed, out)
}

pub fn cmd_superres(checkpoint: &Path, factor: usize, n: usize, seed: u64, out: &Path) -> Result<Vec<Image>> {
    cmd_view(checkpoint, View::SuperRes { factor }, n, seed, out)
}

/// Proxy Fréchet distance between `n` native samples of `gen` (latents
/// from `seed`) and `reals`, on whole images.
pub fn pfd_vs_reals(gen: &GeneratorParams, reals: &[Image], n: usize, seed: u64) -> Result<f64> {
    ensure!(!reals.is_empty(), "no reference images");
    let fakes = render_view(gen, &latents(gen, n, seed)?, View::Native)?;
    ensure!(
        fakes[0].side == reals[0].side,
        "samples have side {}, references {}",
        fakes[0].side,
        reals[0].side
    );
    let side = reals[0].side;
    let a = FeatureStats::from_patches(fakes.iter().map(|i| i.data.as_slice()), side)?;
    let b = FeatureStats::from_patches(reals.iter().map(|i| i.data.as_slice()), side)?;
    Ok(pfd(&a, &b)?)
}

/// Checkpoint file name for a finished stage of `mode`.
pub fn checkpoint_name(mode: Mode, stage: StageId) -> String {
    match mode {
        Mode::Multistage => format!("stage{}.ckpt", stage.index()),
        m => format!("{}.ckpt", m.name()),
    }
}

/// Writes the metrics CSV, periodic sample sheets and stage checkpoints.
struct FileObserver {
    cfg: RunConfig,
    dir: PathBuf,
    csv: BufWriter<File>,
    sheet_z: Option<Tensor>,
    written: Vec<PathBuf>,
}

impl FileObserver {
    fn new(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut csv = BufWriter::new(file);
        writeln!(csv, "{CSV_HEADER}")?;
        Ok(Self {
            cfg: cfg.clone(),
            dir: dir.to_path_buf(),
            csv,
            sheet_z: None,
            written: Vec::new(),
        })
    }

    fn io(e: impl std::fmt::Display) -> inrpatch_core::Error {
        inrpatch_core::Error::InvalidArgument(e.to_string())
    }
}

impl TrainObserver for FileObserver {
    fn on_iteration(&mut self, m: &TrainingMetrics, gen: &GeneratorParams) -> inrpatch_core::Result<()> {
        writeln!(self.csv, "{}", m.csv_row(self.cfg.record_wall_ms))?;
        let every = self.cfg.sample_every;
        if every > 0 && (m.iter + 1).is_multiple_of(every) {
            if self.sheet_z.is_none() {
                let z = latents(gen, self.cfg.sample_count, self.cfg.seed ^ SHEET_SEED_SALT).map_err(Self::io)?;
                self.sheet_z = Some(z);
            }
            let images = render_view(gen, self.sheet_z.as_ref().unwrap(), View::Native).map_err(Self::io)?;
            let path = self.dir.join(format!("samples_iter{:06}.png", m.iter + 1));
            save_image(&path, &tile(&images)?)?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, stage: StageId, gen: &GeneratorParams, _disc: &DiscParams) -> inrpatch_core::Result<()> {
        self.csv.flush()?;
        let path = self.dir.join(checkpoint_name(self.cfg.mode, stage));
        Checkpoint {
            seed: self.cfg.seed,
            gen: gen.clone(),
        }
        .save(&path)?;
        eprintln!("stage {} done: {}", stage.index(), path.display());
        self.written.push(path);
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<TrainingMetrics>,
}

/// Trains `cfg`, writing into `out` (default: the config's `output_dir`).
pub fn train_config(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    let data = Dataset::load(&cfg.dataset, cfg.resolution)?;
    let mut obs = FileObserver::new(cfg, &dir)?;
    let result = run(cfg, &data, &mut obs)?;
    obs.csv.flush()?;
    Ok(TrainSummary {
        metrics_csv: dir.join("metrics.csv"),
        checkpoints: obs.written,
        metrics: result.metrics,
    })
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<TrainSummary> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    train_config(&cfg, out)
}

/// Profiles the three modes; prints the table and optionally saves it.
pub fn cmd_profile(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ProfileReport> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    profile_config(&cfg, out)
}

pub fn profile_config(cfg: &RunConfig, out: Option<&Path>) -> Result<ProfileReport> {
    if cfg.profile_iters == 0 {
        bail!("profile_iters must be positive");
    }
    let data = Dataset::load(&cfg.dataset, cfg.resolution)?;
    let report = profile(cfg, &data, cfg.profile_iters)?;
    let table = report.table();
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}
