//! Synthetic datasets, phantom pairs and image ingestion. Samples are stored
//! row-wise in one tensor, normalized to `[-1, 1]`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const GAUSS2D_RADIUS: f64 = 0.75;
pub const GAUSS2D_STD: f64 = 0.05;
pub const DEFAULT_DOSE_SIGMA: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss2d,
    ImageDir,
    Phantom,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gauss2d => "gauss2d",
            DatasetKind::ImageDir => "image_dir",
            DatasetKind::Phantom => "phantom",
        }
    }
}

/// Samples with an optional row-aligned condition (e.g. low-dose images).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    samples: Tensor<T>,
    cond: Option<Tensor<T>>,
    kind: DatasetKind,
}

impl<T: Real> Dataset<T> {
    pub fn new(samples: Tensor<T>, kind: DatasetKind) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(invalid!("dataset tensor needs a leading sample axis"));
        }
        if let Some(v) = samples.data().iter().find(|v| !(v.is_finite() && v.abs() <= T::one())) {
            return Err(invalid!("dataset value {v} outside [-1, 1]"));
        }
        Ok(Dataset {
            samples,
            cond: None,
            kind,
        })
    }

    /// Attaches conditions. Conditions are only required to be finite.
    pub fn with_cond(mut self, cond: Tensor<T>) -> Result<Self> {
        if cond.rows() != self.len() {
            return Err(invalid!("{} conditions for {} samples", cond.rows(), self.len()));
        }
        if !cond.all_finite() {
            return Err(Error::NonFinite("condition images".into()));
        }
        self.cond = Some(cond);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn dims(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }

    pub fn cond(&self) -> Option<&Tensor<T>> {
        self.cond.as_ref()
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    /// Splits off the last `n` rows as a second dataset.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(invalid!("cannot split {n} rows from {}", self.len()));
        }
        let head: Vec<usize> = (0..self.len() - n).collect();
        let tail: Vec<usize> = (self.len() - n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Dataset {
            samples: gather(&self.samples, idx)?,
            cond: self.cond.as_ref().map(|c| gather(c, idx)).transpose()?,
            kind: self.kind,
        })
    }
}

fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let row = t.row_len();
    let mut out = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= t.rows() {
            return Err(invalid!("row {i} out of range"));
        }
        out.extend_from_slice(t.row(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, out)
}

/// Mode centers of the ring mixture.
pub fn gauss2d_centers(modes: usize) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / modes as f64;
            [GAUSS2D_RADIUS * a.cos(), GAUSS2D_RADIUS * a.sin()]
        })
        .collect()
}

/// `n` points from an equal-weight Gaussian mixture on a ring.
pub fn gen_gauss2d<T: Real, R: Rng + ?Sized>(n: usize, modes: usize, rng: &mut R) -> Result<Dataset<T>> {
    if modes < 1 {
        return Err(invalid!("gauss2d needs at least one mode"));
    }
    let centers = gauss2d_centers(modes);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..modes)];
        for d in c {
            let e: f64 = rng.sample(StandardNormal);
            data.push(T::of((d + GAUSS2D_STD * e).clamp(-1.0, 1.0)));
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 2], data)?, DatasetKind::Gauss2d)
}

/// Index of the nearest mixture mode for each point.
pub fn nearest_mode<T: Real>(points: &Tensor<T>, modes: usize) -> Vec<usize> {
    let centers = gauss2d_centers(modes);
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let (x, y) = (p[0].as_f64(), p[1].as_f64());
            (0..modes)
                .min_by(|&a, &b| {
                    let da = (x - centers[a][0]).powi(2) + (y - centers[a][1]).powi(2);
                    let db = (x - centers[b][0]).powi(2) + (y - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair<T> {
    /// `(1, size, size)`.
    pub clean: Tensor<T>,
    /// `clean + N(0, noise_sigma²)`, not clipped.
    pub low_dose: Tensor<T>,
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub ellipses: (usize, usize),
    pub dose_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            ellipses: (2, 5),
            dose_sigma: DEFAULT_DOSE_SIGMA,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let theta = rng.random_range(0.0..PI);
        Ellipse {
            cx: rng.random_range(-0.5..0.5),
            cy: rng.random_range(-0.5..0.5),
            a: rng.random_range(0.15..0.45),
            b: rng.random_range(0.15..0.45),
            cos: theta.cos(),
            sin: theta.sin(),
            intensity: rng.random_range(0.4..1.2),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Clean phantom: background `-1` plus random ellipses, clipped to `[-1, 1]`.
fn render_phantom<R: Rng + ?Sized>(size: usize, count: usize, rng: &mut R) -> Vec<f64> {
    let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(rng)).collect();
    let mut img = vec![-1.0; size * size];
    for (p, px) in img.iter_mut().enumerate() {
        // Pixel centers on [-1, 1].
        let x = (2.0 * (p % size) as f64 + 1.0) / size as f64 - 1.0;
        let y = (2.0 * (p / size) as f64 + 1.0) / size as f64 - 1.0;
        for e in &ellipses {
            if e.contains(x, y) {
                *px += e.intensity;
            }
        }
        *px = px.clamp(-1.0, 1.0);
    }
    img
}

pub fn gen_phantoms<T: Real, R: Rng + ?Sized>(
    n: usize,
    cfg: &PhantomConfig,
    rng: &mut R,
) -> Result<Vec<PhantomPair<T>>> {
    if cfg.size < 16 {
        return Err(invalid!("phantom size must be >= 16, got {}", cfg.size));
    }
    let (lo, hi) = cfg.ellipses;
    if lo < 1 || lo > hi {
        return Err(invalid!("ellipse count range ({lo}, {hi}) invalid"));
    }
    if !(cfg.dose_sigma >= 0.0 && cfg.dose_sigma.is_finite()) {
        return Err(invalid!("dose sigma must be nonnegative, got {}", cfg.dose_sigma));
    }
    let shape = [1, cfg.size, cfg.size];
    (0..n)
        .map(|_| {
            let count = rng.random_range(lo..=hi);
            let clean = render_phantom(cfg.size, count, rng);
            let low: Vec<f64> = clean
                .iter()
                .map(|&v| {
                    let e: f64 = rng.sample(StandardNormal);
                    v + cfg.dose_sigma * e
                })
                .collect();
            Ok(PhantomPair {
                clean: Tensor::from_f64(&shape, &clean)?,
                low_dose: Tensor::from_f64(&shape, &low)?,
                noise_sigma: cfg.dose_sigma,
            })
        })
        .collect()
}

/// Stacks phantom pairs into a dataset of clean images conditioned on the
/// low-dose ones.
pub fn phantom_dataset<T: Real>(pairs: &[PhantomPair<T>]) -> Result<Dataset<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no phantom pairs".into()));
    }
    let clean: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.clean).collect();
    let low: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.low_dose).collect();
    Dataset::new(Tensor::stack(&clean)?, DatasetKind::Phantom)?.with_cond(Tensor::stack(&low)?)
}

/// An 8-bit image, interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels || !(channels == 1 || channels == 3) {
            return Err(invalid!(
                "image buffer of {} bytes does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Converts between grayscale (ITU-R 601 luma) and RGB (replication).
    pub fn to_channels(&self, channels: usize) -> Result<RawImage> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
                    .collect();
                RawImage::new(self.width, self.height, 1, data)
            }
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                RawImage::new(self.width, self.height, 3, data)
            }
            (a, b) => Err(invalid!("cannot convert {a} channels to {b}")),
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<RawImage> {
        if width == 0 || height == 0 {
            return Err(invalid!("resize target must be nonempty"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(width * height * c);
        let coord = |o: usize, n_out: usize, n_in: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, self.width);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * c + ch] as f64;
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RawImage::new(width, height, c, out)
    }

    /// `(channels, height, width)` tensor mapped linearly onto `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (c, hw) = (self.channels, self.width * self.height);
        let mut out = vec![T::zero(); c * hw];
        for (p, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + p] = T::of(v as f64 / 127.5 - 1.0);
            }
        }
        Tensor::from_vec(&[c, self.height, self.width], out).expect("sizes match")
    }

    /// Inverse of [`RawImage::to_tensor`]; values are clamped to `[-1, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<RawImage> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(invalid!("expected (channels, height, width), got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let mut data = vec![0u8; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                let v = t.data()[ch * hw + p].as_f64();
                let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
                data[p * c + ch] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
        RawImage::new(w, h, c, data)
    }
}

fn read_token<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            if tok.is_empty() {
                return Err(Error::format(path, "truncated netpbm header"));
            }
            return Ok(tok);
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            while byte[0] != b'\n' && byte[0] != b'\r' {
                if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
                    return Err(Error::format(path, "truncated netpbm header"));
                }
            }
        } else if b.is_ascii_whitespace() {
            // A token ends at exactly one whitespace byte.
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

/// Reads a binary PGM (P5) or PPM (P6). 16-bit samples are rescaled to 8 bits.
pub fn read_pnm(path: &Path) -> Result<RawImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(path, format!("unsupported netpbm magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        read_token(&mut r, path)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad {what} in header")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::format(path, "invalid netpbm dimensions or maxval"));
    }
    let n = width * height * channels;
    let wide = maxval > 255;
    let mut raw = vec![0u8; if wide { 2 * n } else { n }];
    r.read_exact(&mut raw)
        .map_err(|_| Error::format(path, "raster shorter than header declares"))?;
    let scale = |v: u32| ((v as f64) * 255.0 / maxval as f64).round() as u8;
    let data = if wide {
        raw.chunks_exact(2)
            .map(|b| scale(u16::from_be_bytes([b[0], b[1]]) as u32))
            .collect()
    } else if maxval == 255 {
        raw
    } else {
        raw.into_iter().map(|v| scale(v as u32)).collect()
    };
    RawImage::new(width, height, channels, data)
}

/// Writes P5 for one channel and P6 for three, maxval 255.
pub fn write_pnm(path: &Path, img: &RawImage) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data): (usize, Vec<u8>) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    RawImage::new(w, h, channels, data)
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm" | "ppm" | "pnm" | "png")
    )
}

pub fn read_image(path: &Path) -> Result<RawImage> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => read_png(path),
        _ => read_pnm(path),
    }
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads, converts and resizes every file into one `(N, C, H, W)` dataset.
pub fn load_images<T: Real>(files: &[PathBuf], channels: usize, height: usize, width: usize) -> Result<Dataset<T>> {
    if files.is_empty() {
        return Err(Error::EmptyDataset("no image files".into()));
    }
    let mut tensors = Vec::with_capacity(files.len());
    for f in files {
        let img = read_image(f)?.to_channels(channels)?.resize(width, height)?;
        tensors.push(img.to_tensor::<T>());
    }
    let refs: Vec<&Tensor<T>> = tensors.iter().collect();
    Dataset::new(Tensor::stack(&refs)?, DatasetKind::ImageDir)
}

pub fn load_image_dir<T: Real>(dir: &Path, channels: usize, height: usize, width: usize) -> Result<Dataset<T>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PGM/PNG images in {}", dir.display())));
    }
    load_images(&files, channels, height, width)
}

/// A line-delimited file list; relative entries resolve against the
/// manifest's directory. Blank lines and `#` comments are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub cond: Option<Tensor<T>>,
    pub indices: Vec<usize>,
}

/// Uniform sampling of rows with replacement.
pub fn minibatch<T: Real, R: Rng + ?Sized>(data: &Dataset<T>, batch_size: usize, rng: &mut R) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot draw from an empty dataset".into()));
    }
    if batch_size < 1 {
        return Err(invalid!("batch_size must be >= 1"));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
    let x = gather(&data.samples, &indices)?;
    let cond = data.cond.as_ref().map(|c| gather(c, &indices)).transpose()?;
    Ok(Batch { x, cond, indices })
}
