//! Sample-quality metrics, sampling helpers and schedule statistics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::consistency::{karras_schedule, multi_step_sample, single_step_sample, ConsistencyFunction};
use crate::data::{nearest_mode, Dataset};
use crate::error::{invalid, Error, Result};
use crate::network::Model;
use crate::scalar::Real;
use crate::schedules::HIGH_NOISE_THRESHOLD;
use crate::tensor::Tensor;
use crate::train::{draw_levels, noise_rng, write_atomic, DataSource, GridCache, TrainConfig};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean squared difference.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.numel() == 0 {
        return Err(invalid!("mse of empty tensors"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(range² / MSE)` in dB; `f64::INFINITY` for identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(invalid!("data_range must be positive, got {data_range}"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// `(planes, height, width)` of an image tensor: the last two axes are
/// spatial, everything before them is flattened into planes.
fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [lead @ .., h, w] => Ok((lead.iter().product(), *h, *w)),
        _ => Err(invalid!("expected an image tensor, got shape {shape:?}")),
    }
}

/// Separable filtering over valid positions only.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every valid `window × window` Gaussian
/// window (`σ = 1.5`) and every channel.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, window: usize, data_range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(data_range > 0.0) {
        return Err(invalid!("data_range must be positive, got {data_range}"));
    }
    if window < 1 {
        return Err(invalid!("window must be >= 1"));
    }
    let (np, h, w) = planes(a.shape())?;
    if h < window || w < window {
        return Err(invalid!("image {h}x{w} is smaller than the {window}x{window} window"));
    }
    let taps = gaussian_taps(window, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (ad, bd) = (a.to_f64_vec(), b.to_f64_vec());
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..np {
        let x = &ad[p * h * w..(p + 1) * h * w];
        let y = &bd[p * h * w..(p + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|s| filter_valid(s, h, w, &taps));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

/// 2-Wasserstein distance between two 1-D empirical distributions.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("empty sample"));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        return Ok((s / na as f64).sqrt());
    }
    // Walk the merged quantile breakpoints i/na and j/nb.
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        // Cross-multiplied comparisons keep the walk exact.
        let ea = (i + 1) * nb;
        let eb = (j + 1) * na;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(acc.sqrt())
}

/// Average 1-D 2-Wasserstein distance over `n_projections` random unit
/// directions. Rows are points.
pub fn sliced_wasserstein<T: Real, R: Rng + ?Sized>(
    set_a: &Tensor<T>,
    set_b: &Tensor<T>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if set_a.rows() == 0 || set_b.rows() == 0 {
        return Err(Error::EmptyDataset("sliced Wasserstein needs nonempty sets".into()));
    }
    let d = set_a.row_len();
    if set_b.row_len() != d {
        return Err(Error::ShapeMismatch(format!(
            "point dimension {d} vs {}",
            set_b.row_len()
        )));
    }
    if n_projections < 1 {
        return Err(invalid!("need at least one projection"));
    }
    let project = |t: &Tensor<T>, dir: &[f64]| -> Vec<f64> {
        (0..t.rows())
            .map(|r| t.row(r).iter().zip(dir).map(|(&v, &u)| v.as_f64() * u).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_projections {
        let dir = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
            }
        };
        total += wasserstein_1d(&mut project(set_a, &dir), &mut project(set_b, &dir))?;
    }
    Ok(total / n_projections as f64)
}

/// Fraction of points nearest to each ring-mixture mode.
pub fn mode_coverage<T: Real>(points: &Tensor<T>, modes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; modes];
    for m in nearest_mode(points, modes) {
        counts[m] += 1;
    }
    let n = points.rows().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Draws `n` samples with `nfe` network evaluations each, in chunks of
/// `chunk` rows. `cond`, when given, must have `n` rows.
pub fn generate<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    n: usize,
    nfe: usize,
    cond: Option<&Tensor<T>>,
    chunk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    if let Some(c) = cond {
        if c.rows() != n {
            return Err(invalid!("{} condition rows for {n} samples", c.rows()));
        }
    }
    let mut shape = vec![n];
    shape.extend(model.sample_shape());
    if n == 0 {
        return Ok(Tensor::zeros(&shape));
    }
    let range = cfg.model_range();
    let f = ConsistencyFunction::new(model, cfg.scalings, range);
    let schedule = karras_schedule(&range, nfe)?;
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(shape.iter().product());
    let mut start = 0;
    while start < n {
        let m = chunk.min(n - start);
        let mut s = shape.clone();
        s[0] = m;
        let z = Tensor::randn(&s, rng);
        let c = cond.map(|c| slice_rows(c, start, m)).transpose()?;
        let x = if nfe == 1 {
            single_step_sample(&f, &z, c.as_ref())?
        } else {
            multi_step_sample(&f, &schedule, &z, c.as_ref(), rng)?
        };
        out.extend_from_slice(x.data());
        start += m;
    }
    Tensor::from_vec(&shape, out)
}

pub(crate) fn slice_rows<T: Real>(t: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let rl = t.row_len();
    let mut s = t.shape().to_vec();
    s[0] = count;
    Tensor::from_vec(&s, t.data()[start * rl..(start + count) * rl].to_vec())
}

/// Mean per-image PSNR and SSIM of `pred` against `clean` (rows are images,
/// pixel range 2).
pub fn image_scores<T: Real>(pred: &Tensor<T>, clean: &Tensor<T>) -> Result<(f64, f64)> {
    pred.check_same_shape(clean)?;
    if pred.rows() == 0 {
        return Err(Error::EmptyDataset("no images to score".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for r in 0..pred.rows() {
        let (a, b) = (pred.row_tensor(r), clean.row_tensor(r));
        p += psnr(&a, &b, 2.0)?;
        s += ssim(&a, &b, SSIM_WINDOW, 2.0)?;
    }
    let n = pred.rows() as f64;
    Ok((p / n, s / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

pub const METRIC_HEADER: &str = "metric,value,n,config_hash";

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, n_samples: usize, config_hash: impl Into<String>) -> Result<Self> {
        if n_samples < 1 {
            return Err(invalid!("a metric needs n_samples >= 1"));
        }
        Ok(MetricReport {
            name: name.into(),
            value,
            n_samples,
            config_hash: config_hash.into(),
        })
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{METRIC_HEADER}\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{}", r.name, r.value, r.n_samples, r.config_hash);
    }
    s
}

pub fn write_metrics(path: &Path, reports: &[MetricReport]) -> Result<()> {
    write_atomic(path, metrics_csv(reports).as_bytes())
}

/// Curriculum, PMF and high-noise statistics of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleReport {
    /// `(k, N(k))` for every step `0..=K`.
    pub curriculum: Vec<(u64, usize)>,
    /// `(k, index, σ_i, pmf)` rows at the selected steps.
    pub pmfs: Vec<(u64, usize, f64, f64)>,
    /// Per selected step: `(k, exact P(σ_hi ≥ 40), empirical fraction, injected fraction)`.
    pub high_noise: Vec<HighNoiseRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighNoiseRow {
    pub step: u64,
    pub n: usize,
    /// Probability of an upper level at or above the threshold, sampler only.
    pub pmf_tail: f64,
    /// Expected fraction including the injected entries.
    pub expected: f64,
    pub empirical: f64,
    /// Injected entries per batch over batch size.
    pub injected: f64,
    pub draws: usize,
}

/// Tabulates `N(k)`, the index PMF at each step in `at`, and the fraction of
/// upper levels `≥ 40` over `batches` mini-batches of `cfg.batch_size`.
pub fn schedule_report(cfg: &TrainConfig, at: &[u64], batches: usize) -> Result<ScheduleReport> {
    let k_total = cfg.curriculum.total_steps();
    let curriculum = (0..=k_total)
        .map(|k| Ok((k, cfg.curriculum.n_at(k)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut grids = GridCache::new(cfg);
    let mut pmfs = Vec::new();
    let mut high_noise = Vec::new();
    let b = cfg.batch_size;
    for &k in at {
        let n = cfg.curriculum.n_at(k)?;
        let grid = grids.get(n)?.clone();
        let pmf = cfg.sampler.pmf(&grid);
        for (i, &p) in pmf.iter().enumerate() {
            pmfs.push((k, i, grid.sigmas()[i], p));
        }
        let tail: f64 = pmf
            .iter()
            .enumerate()
            .filter(|&(i, _)| grid.pair(i).1 >= HIGH_NOISE_THRESHOLD)
            .map(|(_, p)| p)
            .sum();
        let m = cfg.injection.count(b);
        let injected = m as f64 / b as f64;
        let mut hits = 0usize;
        let mut rng = noise_rng(cfg.seed, k);
        for _ in 0..batches {
            let lv = draw_levels(cfg, &grid, b, &mut rng)?;
            hits += lv.sigma_hi.iter().filter(|&&s| s >= HIGH_NOISE_THRESHOLD).count();
        }
        let draws = batches * b;
        high_noise.push(HighNoiseRow {
            step: k,
            n,
            pmf_tail: tail,
            expected: injected + (1.0 - injected) * tail,
            empirical: if draws > 0 {
                hits as f64 / draws as f64
            } else {
                f64::NAN
            },
            injected,
            draws,
        });
    }
    Ok(ScheduleReport {
        curriculum,
        pmfs,
        high_noise,
    })
}

impl ScheduleReport {
    pub fn curriculum_csv(&self) -> String {
        let mut s = String::from("step,n\n");
        for (k, n) in &self.curriculum {
            let _ = writeln!(s, "{k},{n}");
        }
        s
    }

    pub fn pmf_csv(&self) -> String {
        let mut s = String::from("step,index,sigma,pmf\n");
        for (k, i, sigma, p) in &self.pmfs {
            let _ = writeln!(s, "{k},{i},{sigma},{p}");
        }
        s
    }

    pub fn high_noise_csv(&self) -> String {
        let mut s = String::from("step,n,pmf_tail,expected,empirical,injected,draws\n");
        for r in &self.high_noise {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.n, r.pmf_tail, r.expected, r.empirical, r.injected, r.draws
            );
        }
        s
    }
}

/// Rows used by [`evaluate`] when generating images.
pub const IMAGE_CHUNK: usize = 8;
const POINT_CHUNK: usize = 1024;

/// Standard metrics for a trained model.
///
/// Point and unconditional image data: sliced-Wasserstein distance of
/// `eval.samples` generated samples to the held-out rows, next to the same
/// distance for an equally sized slice of the training rows; for the ring
/// mixture also the smallest per-mode share of samples. Conditional data:
/// mean PSNR and SSIM of the denoised held-out images and of their
/// low-dose inputs, both against the clean images.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    holdout: &Dataset<T>,
    nfe: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricReport>> {
    let hash = cfg.hash();
    if holdout.is_empty() {
        return Err(Error::EmptyDataset("no held-out rows to evaluate against".into()));
    }
    let mut out = Vec::new();
    if let Some(low) = holdout.cond() {
        let n = holdout.len();
        let clean = holdout.samples();
        let den = generate(model, cfg, n, nfe, Some(low), IMAGE_CHUNK, rng)?;
        let (pd, sd) = image_scores(&den, clean)?;
        let (pl, sl) = image_scores(low, clean)?;
        out.push(MetricReport::new(format!("psnr_nfe{nfe}"), pd, n, &hash)?);
        out.push(MetricReport::new("psnr_low_dose", pl, n, &hash)?);
        out.push(MetricReport::new(format!("ssim_nfe{nfe}"), sd, n, &hash)?);
        out.push(MetricReport::new("ssim_low_dose", sl, n, &hash)?);
        return Ok(out);
    }
    let n = cfg.eval.samples.max(1);
    let chunk = if model.sample_shape().len() == 1 {
        POINT_CHUNK
    } else {
        IMAGE_CHUNK
    };
    let samples = generate(model, cfg, n, nfe, None, chunk, rng)?;
    let p = cfg.eval.projections;
    let sw = sliced_wasserstein(&samples, holdout.samples(), p, &mut rng.clone())?;
    let m = n.min(train.len());
    let idx: Vec<usize> = (0..m).collect();
    let base = sliced_wasserstein(train.select(&idx)?.samples(), holdout.samples(), p, &mut rng.clone())?;
    out.push(MetricReport::new(format!("sw_nfe{nfe}"), sw, n, &hash)?);
    out.push(MetricReport::new("sw_baseline", base, m, &hash)?);
    if let DataSource::Gauss2d { modes } = cfg.data.source {
        let cov = mode_coverage(&samples, modes);
        let min = cov.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(MetricReport::new("mode_min_frac", min, n, &hash)?);
    }
    Ok(out)
}
