//! Image datasets, PNG I/O and per-stage real batches.
//!
//! Images are stored planar (`[3, side, side]`, values in `[0, 1]`) so that
//! batches can be assembled in NCHW without reshuffling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coords::StageId;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    /// Planar RGB, `3·side²` values.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return invalid(format!(
                "image of side {side} needs {} values, got {}",
                3 * side * side,
                data.len()
            ));
        }
        Ok(Self { side, data })
    }

    /// Box filter down to `side / factor` per axis.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.side.is_multiple_of(factor) {
            return invalid(format!("cannot downsample side {} by {factor}", self.side));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (s, o) = (self.side, self.side / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = Vec::with_capacity(3 * o * o);
        for c in 0..3 {
            let plane = &self.data[c * s * s..(c + 1) * s * s];
            for i in 0..o {
                for j in 0..o {
                    let mut acc = 0.0;
                    for di in 0..factor {
                        let row = &plane[(i * factor + di) * s + j * factor..][..factor];
                        acc += row.iter().sum::<f32>();
                    }
                    out.push(acc * norm);
                }
            }
        }
        Image::new(o, out)
    }

    /// `crop × crop` sub-array with top-left `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, crop: usize) -> Result<Image> {
        if row + crop > self.side || col + crop > self.side {
            return invalid(format!("crop {crop} at ({row}, {col}) exceeds side {}", self.side));
        }
        let s = self.side;
        let mut out = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for i in 0..crop {
                out.extend_from_slice(&self.data[c * s * s + (row + i) * s + col..][..crop]);
            }
        }
        Image::new(crop, out)
    }

    /// Interleaved RGB bytes, rounded and clamped.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.side * self.side;
        let mut out = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                out.push(to_u8(self.data[c * n + p]));
            }
        }
        out
    }

    /// Planar image from `[n, 3]` generator rows laid out row-major over the grid.
    pub fn from_rows(side: usize, rows: &[f32]) -> Result<Image> {
        let n = side * side;
        if rows.len() != 3 * n {
            return invalid(format!("{} rows do not form a {side}×{side} image", rows.len() / 3));
        }
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = rows[3 * p + c];
            }
        }
        Image::new(side, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes 8-bit RGB.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file_err = |reason: String| Error::File {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::create(path).map_err(|e| file_err(e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| file_err(e.to_string()))?;
    w.write_image_data(rgb).map_err(|e| file_err(e.to_string()))?;
    w.finish().map_err(|e| file_err(e.to_string()))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_png(path, img.side, img.side, &img.to_rgb8())
}

/// Reads an 8-bit RGB PNG into `(width, height, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file_err = |reason: String| Error::File {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| file_err(e.to_string()))?;
    let mut reader = png::Decoder::new(file)
        .read_info()
        .map_err(|e| file_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| file_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(file_err(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (w, h, bytes) = read_png(path)?;
    if w != h {
        return Err(Error::File {
            path: path.to_path_buf(),
            reason: format!("image is {w}×{h}, expected square"),
        });
    }
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = bytes[3 * p + c] as f32 / 255.0;
        }
    }
    Image::new(w, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Procedural { count: usize, seed: u64 },
    Folder(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub source: DatasetSource,
}

impl Dataset {
    pub fn side(&self) -> usize {
        self.images[0].side
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(source: &DatasetSource, side: usize) -> Result<Dataset> {
        let ds = match source {
            DatasetSource::Procedural { count, seed } => make_procedural(*count, side, *seed)?,
            DatasetSource::Folder(p) => load_folder(p)?,
        };
        if ds.side() != side {
            return invalid(format!("dataset images have side {}, config expects {side}", ds.side()));
        }
        Ok(ds)
    }

    /// Splits into `(first k, rest)`.
    pub fn split(&self, k: usize) -> (Vec<Image>, Vec<Image>) {
        let k = k.min(self.images.len());
        (self.images[..k].to_vec(), self.images[k..].to_vec())
    }
}

/// Every `*.png` in `dir`, in lexicographic filename order.
pub fn load_folder(dir: &Path) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            paths.push(p);
        }
    }
    paths.sort();
    let Some(first) = paths.first() else {
        return Err(Error::File {
            path: dir.to_path_buf(),
            reason: "no PNG files".into(),
        });
    };
    let mut images = Vec::with_capacity(paths.len());
    let first_side = load_image(first)?.side;
    for p in &paths {
        let img = load_image(p)?;
        if img.side != first_side {
            return Err(Error::File {
                path: p.clone(),
                reason: format!("side {} differs from {first_side}", img.side),
            });
        }
        images.push(img);
    }
    Ok(Dataset {
        images,
        source: DatasetSource::Folder(dir.to_path_buf()),
    })
}

const SUPERSAMPLE: usize = 4;

/// Toy scenes: a vertically shaded background of random colour with one
/// random-coloured disk. Edges are anti-aliased by 4×4 supersampling.
pub fn make_procedural(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || side < 2 {
        return invalid("procedural dataset needs n ≥ 1 and side ≥ 2");
    }
    let mut root = Rng::new(seed);
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = root.fork(k as u64);
        let mut u = || rng.uniform_open0();
        let bg = [0.1 + 0.8 * u(), 0.1 + 0.8 * u(), 0.1 + 0.8 * u()];
        let fg = [u(), u(), u()];
        let s = side as f64;
        let radius = (0.2 + 0.15 * u()) * s;
        let cy = radius + (s - 2.0 * radius) * u();
        let cx = radius + (s - 2.0 * radius) * u();
        let plane = side * side;
        let mut data = vec![0.0f32; 3 * plane];
        for i in 0..side {
            let shade = 0.6 + 0.4 * (i as f64 + 0.5) / s;
            for j in 0..side {
                let mut cover = 0usize;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let y = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64;
                        if (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius {
                            cover += 1;
                        }
                    }
                }
                let t = cover as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let v = (1.0 - t) * bg[c] * shade + t * fg[c];
                    data[c * plane + i * side + j] = v as f32;
                }
            }
        }
        images.push(Image::new(side, data)?);
    }
    Ok(Dataset {
        images,
        source: DatasetSource::Procedural { count: n, seed },
    })
}

/// Draws real batches at one lattice density, cropped to a fixed side.
/// Downsampled copies are computed once.
pub struct RealSampler {
    levels: Vec<Image>,
    crop: usize,
}

impl RealSampler {
    /// Images box-downsampled to `density` per side, cropped to `crop`.
    pub fn new(data: &Dataset, density: usize, crop: usize) -> Result<Self> {
        if data.is_empty() {
            return invalid("dataset is empty");
        }
        let side = data.side();
        if density == 0 || !side.is_multiple_of(density) || crop == 0 || crop > density {
            return invalid(format!(
                "bad real-batch geometry: side {side}, density {density}, crop {crop}"
            ));
        }
        let levels = data
            .images
            .iter()
            .map(|im| im.downsample(side / density))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, crop })
    }

    pub fn for_stage(data: &Dataset, stage: StageId, crop: usize) -> Result<Self> {
        Self::new(data, stage.density(data.side()), crop)
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// `[B, 3, crop, crop]`: uniform image index, uniform lattice offset.
    pub fn batch(&self, batch: usize, rng: &mut Rng) -> Result<Tensor> {
        let (b, _) = self.batch_with_offsets(batch, rng)?;
        Ok(b)
    }

    pub fn batch_with_offsets(&self, batch: usize, rng: &mut Rng) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let density = self.levels[0].side;
        let span = density - self.crop + 1;
        let mut data = Vec::with_capacity(batch * 3 * self.crop * self.crop);
        let mut offsets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = rng.below(self.levels.len());
            let (r, c) = (rng.below(span), rng.below(span));
            data.extend_from_slice(&self.levels[idx].crop(r, c, self.crop)?.data);
            offsets.push((r, c));
        }
        Ok((Tensor::from_vec(&[batch, 3, self.crop, self.crop], data)?, offsets))
    }
}

/// Real batch for `stage`: side-`H/4` arrays from images downsampled to the
/// stage density (a full downsampled image in stage 1).
pub fn real_batch(data: &Dataset, stage: StageId, batch: usize, rng: &mut Rng) -> Result<Tensor> {
    RealSampler::for_stage(data, stage, data.side() / 4)?.batch(batch, rng)
}

/// Tiles equally sized images into a near-square sheet.
pub fn tile(images: &[Image]) -> Result<Image> {
    let Some(first) = images.first() else {
        return invalid("nothing to tile");
    };
    let s = first.side;
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let side = s * cols.max(rows);
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    for (k, im) in images.iter().enumerate() {
        if im.side != s {
            return invalid("tiled images must share one size");
        }
        let (r0, c0) = ((k / cols) * s, (k % cols) * s);
        for c in 0..3 {
            for i in 0..s {
                let src = &im.data[c * s * s + i * s..][..s];
                data[c * plane + (r0 + i) * side + c0..][..s].copy_from_slice(src);
            }
        }
    }
    Image::new(side, data)
}

/// Counts of each crop offset, used to compare offset laws.
pub fn offset_histogram(offsets: &[(usize, usize)]) -> BTreeMap<(usize, usize), usize> {
    let mut h = BTreeMap::new();
    for &o in offsets {
        *h.entry(o).or_insert(0) += 1;
    }
    h
}
