//! The consistency-training loop: curriculum, level sampling, loss,
//! optimizer, EMA teacher, checkpoints and the per-step log.

mod config;
mod optim;


use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{
    parse_config_text, parse_override, preset, read_config_file, ArchConfig, DataConfig, DataSource, EvalConfig,
    TrainConfig, KEYS, PRESETS,
};
pub use optim::{
    adam_step, clip_grad_norm, global_norm, radam_rho, rectified_adam_step, AdamParams, AdamState, OptimizerKind,
};

use crate::autograd::ParamStore;
use crate::consistency::{ct_loss, ema_update, ConsistencyFunction, CtBatch};
use crate::data::{
    gen_gauss2d, gen_phantoms, load_image_dir, load_images, minibatch, phantom_dataset, read_manifest, Batch, Dataset,
};
use crate::error::{invalid, Error, Result};
use crate::network::checkpoint::Checkpoint;
use crate::network::{Model, NetSpec};
use crate::scalar::Real;
use crate::schedules::{
    choose_injections, karras_grid, sinusoidal_grid_with, GridKind, NoiseGrid, HIGH_NOISE_THRESHOLD,
};
use crate::tensor::Tensor;

/// Stream ids reserved outside the per-step range `0..2K`.
const INIT_STREAM: u64 = u64::MAX;
const DATA_STREAM: u64 = u64::MAX - 1;
/// Stream used by evaluation after training.
pub const EVAL_STREAM: u64 = u64::MAX - 2;

/// The ChaCha8 stream `stream` of `seed`. Step `k` draws its mini-batch rows
/// from stream `2k` and its noise levels, noise and dropout from `2k + 1`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn batch_rng(seed: u64, k: u64) -> ChaCha8Rng {
    stream_rng(seed, 2 * k)
}

pub fn noise_rng(seed: u64, k: u64) -> ChaCha8Rng {
    stream_rng(seed, 2 * k + 1)
}

/// Training rows plus an optional held-out split.
pub struct DataSplit<T> {
    pub train: Dataset<T>,
    pub holdout: Option<Dataset<T>>,
}

/// Generates or loads the configured dataset.
pub fn load_data<T: Real>(cfg: &TrainConfig) -> Result<DataSplit<T>> {
    let d = &cfg.data;
    let mut rng = stream_rng(cfg.seed, DATA_STREAM);
    let all = match &d.source {
        DataSource::Gauss2d { modes } => gen_gauss2d(d.n + d.holdout, *modes, &mut rng)?,
        DataSource::Phantom(p) => phantom_dataset(&gen_phantoms(d.n + d.holdout, p, &mut rng)?)?,
        DataSource::ImageDir(dir) => load_image_dir(dir, d.channels, d.size, d.size)?,
        DataSource::Manifest(path) => load_images(&read_manifest(path)?, d.channels, d.size, d.size)?,
    };
    if d.holdout == 0 {
        return Ok(DataSplit {
            train: all,
            holdout: None,
        });
    }
    if d.holdout >= all.len() {
        return Err(Error::Config(format!(
            "data.holdout = {} leaves no training rows out of {}",
            d.holdout,
            all.len()
        )));
    }
    let (train, holdout) = all.split_tail(d.holdout)?;
    Ok(DataSplit {
        train,
        holdout: Some(holdout),
    })
}

/// Grids memoized by size.
pub struct GridCache {
    kind: GridKind,
    cfg: TrainConfig,
    grids: HashMap<usize, NoiseGrid>,
}

impl GridCache {
    pub fn new(cfg: &TrainConfig) -> Self {
        GridCache {
            kind: cfg.grid_kind,
            cfg: cfg.clone(),
            grids: HashMap::new(),
        }
    }

    pub fn get(&mut self, n: usize) -> Result<&NoiseGrid> {
        if !self.grids.contains_key(&n) {
            let g = match self.kind {
                GridKind::Karras => karras_grid(&self.cfg.range, n)?,
                GridKind::Sinusoidal => sinusoidal_grid_with(&self.cfg.range, n, self.cfg.amplitude)?,
            };
            self.grids.insert(n, g);
        }
        Ok(&self.grids[&n])
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Noise-level pairs for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Levels {
    pub sigma_lo: Vec<f64>,
    pub sigma_hi: Vec<f64>,
    /// Positions whose upper level came from high-noise injection.
    pub injected: Vec<usize>,
}

/// Samples pair indices from the configured distribution, then replaces the
/// injected positions by `(level below σ*, σ*)`.
pub fn draw_levels(cfg: &TrainConfig, grid: &NoiseGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Levels> {
    let idx = cfg.sampler.sample(grid, count, rng)?;
    let (mut lo, mut hi): (Vec<f64>, Vec<f64>) = idx.iter().map(|&i| grid.pair(i)).unzip();
    let mut injected = Vec::new();
    for (pos, s) in choose_injections(count, &cfg.injection, rng)? {
        lo[pos] = grid
            .level_below(s)
            .ok_or_else(|| invalid!("no grid level below injected sigma {s}"))?;
        hi[pos] = s;
        injected.push(pos);
    }
    Ok(Levels {
        sigma_lo: lo,
        sigma_hi: hi,
        injected,
    })
}

/// Digest of a mini-batch's row indices and values.
pub fn batch_hash<T: Real>(batch: &Batch<T>) -> u64 {
    let mut h = Sha256::new();
    for &i in &batch.indices {
        h.update((i as u64).to_le_bytes());
    }
    for v in batch.x.data() {
        h.update(v.as_f64().to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub n: usize,
    pub loss: f64,
    pub sigma_mean: f64,
    /// Fraction of upper levels at or above the high-noise threshold.
    pub sigma_max_frac: f64,
    pub grad_norm: f64,
    pub batch_hash: u64,
}

/// Per-step records of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

pub const RUNLOG_HEADER: &str = "step,n,loss,sigma_mean,sigma_max_frac";

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(invalid!("run log steps must increase: {} after {}", r.step, last.step));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.n, r.loss, r.sigma_mean, r.sigma_max_frac);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Parses a CSV written by [`RunLog::to_csv`]. Gradient norms and batch
    /// hashes are not stored and read back as zero.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(RUNLOG_HEADER) {
            return Err(Error::format(path, "missing run log header"));
        }
        let mut log = RunLog::default();
        for (no, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("line {}: malformed row {line:?}", no + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let rec = StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                n: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                sigma_mean: f[3].parse().map_err(|_| bad())?,
                sigma_max_frac: f[4].parse().map_err(|_| bad())?,
                grad_norm: 0.0,
                batch_hash: 0,
            };
            log.push(rec).map_err(|_| bad())?;
        }
        Ok(log)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Student, teacher and optimizer state after `step` completed steps.
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub teacher: ParamStore<T>,
    pub opt: AdamState<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    /// Freshly initialized student with the teacher equal to it.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let model = Model::build(cfg.net_spec()?, &mut rng)?;
        let teacher = model.params().clone();
        let opt = AdamState::new(model.params().tensors());
        Ok(TrainState {
            model,
            teacher,
            opt,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (k, v) in self.model.spec().to_meta() {
            ck.set_meta(&k, v);
        }
        for (k, v) in cfg.to_map() {
            ck.set_meta(&format!("config.{k}"), v);
        }
        ck.set_meta("train.step", self.step);
        ck.set_meta("train.opt_t", self.opt.t);
        ck.set_meta("train.config_hash", cfg.hash());
        ck.push_store("student", self.model.params());
        ck.push_store("teacher", &self.teacher);
        ck.push_like("adam.m", self.model.params(), &self.opt.m);
        ck.push_like("adam.v", self.model.params(), &self.opt.v);
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`] for `cfg`.
    pub fn from_checkpoint(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.meta("train.config_hash") != Some(cfg.hash().as_str()) {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint config hash {:?} differs from the run's {}",
                ck.meta("train.config_hash").unwrap_or("<none>"),
                cfg.hash()
            )));
        }
        let mut state = TrainState::init(cfg)?;
        let mut student = state.model.params().clone();
        ck.load_store("student", &mut student)?;
        state.model.set_params(student)?;
        ck.load_store("teacher", &mut state.teacher)?;
        state.opt.m = ck.read_like("adam.m", state.model.params())?;
        state.opt.v = ck.read_like("adam.v", state.model.params())?;
        let num = |k: &str| -> Result<u64> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing or bad {k}")))
        };
        state.step = num("train.step")?;
        state.opt.t = num("train.opt_t")?;
        Ok(state)
    }
}

/// Network described by a checkpoint's manifest with the parameters stored
/// under `prefix` (`student` or `teacher`).
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint, prefix: &str) -> Result<Model<T>> {
    let spec = NetSpec::from_meta(&ck.meta)?;
    let mut model = Model::build(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut params = model.params().clone();
    ck.load_store(prefix, &mut params)?;
    model.set_params(params)?;
    Ok(model)
}

/// The training configuration recorded in a checkpoint.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let layers: Vec<(String, String)> = ck
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    if layers.is_empty() {
        return Err(Error::CheckpointMismatch(
            "checkpoint carries no training configuration".into(),
        ));
    }
    TrainConfig::from_layers(None, &layers)
}

/// One optimization step at training step `k` on `batch`.
///
/// Uses the curriculum's `N(k)` levels, draws pairs, noise and dropout from
/// the step's noise stream, clips gradients, applies the optimizer and then
/// the EMA update of the teacher.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    grids: &mut GridCache,
    batch: &Batch<T>,
    k: u64,
) -> Result<StepRecord> {
    let n = cfg.curriculum.n_at(k)?;
    let grid = grids.get(n)?;
    let b = batch.x.rows();
    let mut rng = noise_rng(cfg.seed, k);
    let levels = draw_levels(cfg, grid, b, &mut rng)?;
    let z = Tensor::randn(batch.x.shape(), &mut rng);
    let ct = CtBatch {
        x0: batch.x.clone(),
        z,
        sigma_lo: levels.sigma_lo,
        sigma_hi: levels.sigma_hi,
        cond: batch.cond.clone(),
    };
    let f = ConsistencyFunction::new(&state.model, cfg.scalings, cfg.model_range());
    let out = ct_loss(&f, &state.teacher, &ct, &cfg.huber(), cfg.weighting, Some(&mut rng))?;
    let mut grads = out.grads;
    if !out.loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteLoss {
            step: k,
            sigmas: ct.sigma_hi,
        });
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let params = state.model.params_mut().tensors_mut();
    match cfg.optimizer {
        OptimizerKind::RectifiedAdam => rectified_adam_step(params, &grads, &mut state.opt, &cfg.adam)?,
        OptimizerKind::Adam => adam_step(params, &grads, &mut state.opt, &cfg.adam)?,
    }
    ema_update(&mut state.teacher, state.model.params(), &cfg.ema)?;
    state.step = k + 1;

    let hi = &ct.sigma_hi;
    Ok(StepRecord {
        step: k,
        n,
        loss: out.loss,
        sigma_mean: hi.iter().sum::<f64>() / b as f64,
        sigma_max_frac: hi.iter().filter(|&&s| s >= HIGH_NOISE_THRESHOLD).count() as f64 / b as f64,
        grad_norm,
        batch_hash: batch_hash(batch),
    })
}

/// Options for [`train_loop`].
#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Directory for checkpoints, the run log and the resolved config.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this many completed steps even if `K` is larger.
    pub stop_after: Option<u64>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

pub struct TrainOutcome<T: Real> {
    pub state: TrainState<T>,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn save(dir: &Path, ck: &Checkpoint, log: &RunLog, step: u64, keep_numbered: bool) -> Result<()> {
    ck.write(&dir.join(CHECKPOINT_FILE))?;
    if keep_numbered {
        ck.write(&dir.join(format!("step-{step:08}.ckpt")))?;
    }
    log.write_csv(&dir.join(RUNLOG_FILE))
}

/// Runs `K = cfg.total_steps` steps on `data`, checkpointing every
/// `cfg.checkpoint_every` steps and at the end.
pub fn train_loop<T: Real>(cfg: &TrainConfig, data: &Dataset<T>, mut opts: LoopOptions<'_>) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let mut state = TrainState::init(cfg)?;
    let expect: Vec<usize> = state.model.sample_shape();
    if data.dims() != expect.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "data rows have shape {:?}, network expects {:?}",
            data.dims(),
            expect
        )));
    }
    if state.model.is_conditional() != data.cond().is_some() {
        return Err(Error::Config(format!(
            "network {} conditioning does not match the dataset",
            state.model.spec().name()
        )));
    }
    let mut log = RunLog::default();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
        let latest = dir.join(CHECKPOINT_FILE);
        if opts.resume && latest.exists() {
            state = TrainState::from_checkpoint(cfg, &Checkpoint::read(&latest)?)?;
            let mut prev = RunLog::read_csv(&dir.join(RUNLOG_FILE))?;
            if (prev.len() as u64) < state.step {
                return Err(Error::format(
                    dir.join(RUNLOG_FILE),
                    format!("has {} rows but the checkpoint is at step {}", prev.len(), state.step),
                ));
            }
            prev.records.truncate(state.step as usize);
            log = prev;
        }
    }

    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut grids = GridCache::new(cfg);
    let started = Instant::now();
    for k in state.step..end {
        let batch = minibatch(data, cfg.batch_size, &mut batch_rng(cfg.seed, k))?;
        let rec = train_step(&mut state, cfg, &mut grids, &batch, k)?;
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&rec);
        }
        log.push(rec)?;
        let done = k + 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < end {
                save(dir, &state.to_checkpoint(cfg), &log, done, true)?;
            }
        }
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    let checkpoint = state.to_checkpoint(cfg);
    if let Some(dir) = &opts.out_dir {
        save(dir, &checkpoint, &log, state.step, cfg.checkpoint_every > 0)?;
    }
    Ok(TrainOutcome { state, log, checkpoint })
}
