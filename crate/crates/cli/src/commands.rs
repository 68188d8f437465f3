use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use clab::data::{list_images, read_image, write_pnm, RawImage};
use clab::eval::{
    evaluate, generate, psnr, schedule_report, ssim, write_metrics, MetricReport, IMAGE_CHUNK, SSIM_WINDOW,
};
use clab::network::checkpoint::Checkpoint;
use clab::train::{
    config_from_checkpoint, load_data, model_from_checkpoint, parse_override, read_config_file, stream_rng, train_loop,
    LoopOptions, StepRecord, TrainConfig, EVAL_STREAM,
};
use clab::{Error, Model32, Tensor32};

/// Usage or configuration problem.
pub const EXIT_USAGE: u8 = 2;
/// Failure while running a valid command.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        msg: e.to_string(),
    }
}

/// Configuration errors are usage errors; everything else is a runtime error.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => usage(e),
        _ => runtime(e),
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "clab", version, about = "Consistency-model training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, the run log and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
    },
    /// Single-step denoising of low-dose images with a conditional checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Either a directory of low-dose images, or one with `low/` and
        /// `clean/` subdirectories holding pairs under matching names.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
    },
    /// Write the curriculum, index PMFs and high-noise statistics as CSV.
    InspectSchedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Steps at which to tabulate the PMF (default: 0, K/3, 2K/3, K).
        #[arg(long, value_delimiter = ',')]
        at: Vec<u64>,
        /// Mini-batches drawn per step for the empirical fractions.
        #[arg(long, default_value_t = 400)]
        batches: usize,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
    },
    /// Train the {improved, sinusoidal} x {lognormal, beta} grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds to repeat the grid with (default: the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
    },
    /// Recompute metrics for a checkpoint against its configuration's data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "clab-out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named base configuration: toy2d, phantom64 or image32.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value`, repeatable; wins over the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network evaluations per sample for the final metrics.
    #[arg(long)]
    nfe: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> std::result::Result<TrainConfig, Failure> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            layers.extend(read_config_file(path).map_err(usage)?);
        }
        for o in &self.overrides {
            layers.push(parse_override(o).map_err(usage)?);
        }
        if let Some(s) = self.seed {
            layers.push(("seed".into(), s.to_string()));
        }
        if let Some(n) = self.nfe {
            layers.push(("eval.nfe".into(), n.to_string()));
        }
        TrainConfig::from_layers(self.preset.as_deref(), &layers).map_err(usage)
    }
}

pub fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Command::Train { cfg, out, resume } => cmd_train(&cfg.resolve()?, &out, resume),
        Command::Sample {
            checkpoint,
            n,
            nfe,
            seed,
            out,
        } => cmd_sample(&checkpoint, n, nfe, seed, &out),
        Command::Denoise {
            checkpoint,
            input,
            seed,
            out,
        } => cmd_denoise(&checkpoint, &input, seed, &out),
        Command::InspectSchedule { cfg, at, batches, out } => cmd_inspect(&cfg.resolve()?, &at, batches, &out),
        Command::Ablate { cfg, seeds, out } => cmd_ablate(&cfg.resolve()?, &seeds, &out),
        Command::Eval {
            checkpoint,
            nfe,
            seed,
            out,
        } => cmd_eval(&checkpoint, nfe, seed, &out),
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn progress(total: u64) -> impl FnMut(&StepRecord) {
    let every = (total / 20).max(1);
    move |r: &StepRecord| {
        if (r.step + 1).is_multiple_of(every) || r.step + 1 == total {
            eprintln!("step {:>7}/{total}  N={:<4} loss={:.6}", r.step + 1, r.n, r.loss);
        }
    }
}

/// Trains `cfg` into `out` and returns its metrics.
fn train_into(cfg: &TrainConfig, out: &Path, resume: bool, quiet: bool) -> std::result::Result<TrainResult, Failure> {
    let split = load_data::<f32>(cfg).map_err(classify)?;
    let mut cb = progress(cfg.total_steps);
    let opts = LoopOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        stop_after: None,
        on_step: if quiet { None } else { Some(&mut cb) },
    };
    let outcome = train_loop(cfg, &split.train, opts).map_err(classify)?;
    let mut metrics = Vec::new();
    if let Some(h) = &split.holdout {
        let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
        metrics = evaluate(&outcome.state.model, cfg, &split.train, h, cfg.eval.nfe, &mut rng).map_err(runtime)?;
        write_metrics(&out.join("metrics.csv"), &metrics).map_err(runtime)?;
        if h.cond().is_some() {
            write_pairs(h.cond().expect("conditional"), h.samples(), &out.join("holdout"))?;
        }
    }
    Ok(TrainResult {
        metrics,
        hashes: outcome.log.records.iter().map(|r| r.batch_hash).collect(),
        secs: outcome.log.wall_clock_secs,
    })
}

struct TrainResult {
    metrics: Vec<MetricReport>,
    hashes: Vec<u64>,
    secs: f64,
}

fn cmd_train(cfg: &TrainConfig, out: &Path, resume: bool) -> Outcome {
    create_dir(out)?;
    let r = train_into(cfg, out, resume, false)?;
    eprintln!("trained {} steps in {:.1}s", cfg.total_steps, r.secs);
    for m in &r.metrics {
        println!("{} = {}", m.name, m.value);
    }
    Ok(())
}

/// Writes held-out pairs as `low/NNNN.pgm` and `clean/NNNN.pgm`.
fn write_pairs(low: &Tensor32, clean: &Tensor32, dir: &Path) -> Outcome {
    for sub in ["low", "clean"] {
        create_dir(&dir.join(sub))?;
    }
    for r in 0..low.rows() {
        let name = format!("{r:04}.pgm");
        for (sub, t) in [("low", low), ("clean", clean)] {
            let img = RawImage::from_tensor(&t.row_tensor(r)).map_err(runtime)?;
            write_pnm(&dir.join(sub).join(&name), &img).map_err(runtime)?;
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<(TrainConfig, Model32), Failure> {
    let ck = Checkpoint::read(path).map_err(runtime)?;
    let cfg = config_from_checkpoint(&ck).map_err(runtime)?;
    let model = model_from_checkpoint(&ck, "student").map_err(runtime)?;
    Ok((cfg, model))
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn cmd_sample(checkpoint: &Path, n: usize, nfe: usize, seed: u64, out: &Path) -> Outcome {
    if nfe < 1 {
        return Err(usage("--nfe must be >= 1"));
    }
    let (cfg, model) = load_checkpoint(checkpoint)?;
    if model.is_conditional() {
        return Err(usage("conditional checkpoints sample through `denoise`"));
    }
    if n == 0 {
        return Ok(());
    }
    create_dir(out)?;
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let shape = model.sample_shape();
    let chunk = if shape.len() == 1 { 1024 } else { IMAGE_CHUNK };
    let x = generate(&model, &cfg, n, nfe, None, chunk, &mut rng).map_err(runtime)?;
    if shape.len() == 1 {
        let d = shape[0];
        let mut s: String = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for r in 0..x.rows() {
            let row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        write_file(&out.join("samples.csv"), &s)?;
    } else {
        for r in 0..x.rows() {
            let img = RawImage::from_tensor(&x.row_tensor(r)).map_err(runtime)?;
            let path = out.join(format!("sample-{r:04}.{}", image_ext(shape[0])));
            write_pnm(&path, &img).map_err(runtime)?;
        }
    }
    eprintln!("wrote {n} samples (nfe={nfe}) to {}", out.display());
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn cmd_denoise(checkpoint: &Path, input: &Path, seed: u64, out: &Path) -> Outcome {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let cond_shape = model
        .spec()
        .cond_shape()
        .ok_or_else(|| usage("denoise needs a conditional checkpoint"))?;
    let (low_dir, clean_dir) = if input.join("low").is_dir() {
        (input.join("low"), Some(input.join("clean")))
    } else {
        (input.to_path_buf(), None)
    };
    let files = list_images(&low_dir).map_err(runtime)?;
    if files.is_empty() {
        return Err(runtime(Error::EmptyDataset(format!(
            "no images in {}",
            low_dir.display()
        ))));
    }
    create_dir(out)?;
    let (c, h, w) = (cond_shape[0], cond_shape[1], cond_shape[2]);
    let mut rows = String::from("file,psnr_denoised,ssim_denoised,psnr_input,ssim_input\n");
    let mut agg = [0.0f64; 4];
    let mut scored = 0usize;
    let mut done = 0usize;
    for (i, f) in files.iter().enumerate() {
        let img = match read_image(f).and_then(|r| r.to_channels(c)) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", f.display());
                continue;
            }
        };
        if img.width != w || img.height != h {
            eprintln!(
                "warning: skipping {}: {}x{} does not match the model's {w}x{h}",
                f.display(),
                img.width,
                img.height
            );
            continue;
        }
        let cond = img.to_tensor::<f32>().reshape(&[1, c, h, w]).map_err(runtime)?;
        let mut rng = stream_rng(seed, i as u64);
        let den = generate(&model, &cfg, 1, 1, Some(&cond), 1, &mut rng).map_err(runtime)?;
        let den = den.reshape(&[c, h, w]).map_err(runtime)?;
        let name = file_name(f);
        let stem = Path::new(&name).with_extension(image_ext(c));
        write_pnm(&out.join(stem), &RawImage::from_tensor(&den).map_err(runtime)?).map_err(runtime)?;
        done += 1;
        let clean = clean_dir.as_ref().map(|d| d.join(&name)).filter(|p| p.exists());
        if let Some(cp) = clean {
            let reference = match read_image(&cp).and_then(|r| r.to_channels(c)) {
                Ok(r) if r.width == w && r.height == h => r.to_tensor::<f32>(),
                _ => {
                    eprintln!("warning: no usable reference for {name}");
                    continue;
                }
            };
            let input_t = cond.reshape(&[c, h, w]).map_err(runtime)?;
            let m = [
                psnr(&den, &reference, 2.0).map_err(runtime)?,
                ssim(&den, &reference, SSIM_WINDOW, 2.0).map_err(runtime)?,
                psnr(&input_t, &reference, 2.0).map_err(runtime)?,
                ssim(&input_t, &reference, SSIM_WINDOW, 2.0).map_err(runtime)?,
            ];
            rows.push_str(&format!("{name},{}\n", m.map(fmt_metric).join(",")));
            for (a, v) in agg.iter_mut().zip(m) {
                *a += v;
            }
            scored += 1;
        }
    }
    if scored > 0 {
        write_file(&out.join("denoise.csv"), &rows)?;
        let hash = cfg.hash();
        let names = ["psnr_denoised", "ssim_denoised", "psnr_input", "ssim_input"];
        let reports = names
            .iter()
            .zip(agg)
            .map(|(n, v)| MetricReport::new(*n, v / scored as f64, scored, &hash))
            .collect::<clab::Result<Vec<_>>>()
            .map_err(runtime)?;
        write_metrics(&out.join("metrics.csv"), &reports).map_err(runtime)?;
        for r in &reports {
            println!("{} = {}", r.name, fmt_metric(r.value));
        }
    }
    eprintln!("denoised {done} of {} images into {}", files.len(), out.display());
    Ok(())
}

fn cmd_inspect(cfg: &TrainConfig, at: &[u64], batches: usize, out: &Path) -> Outcome {
    let k = cfg.curriculum.total_steps();
    let at: Vec<u64> = if at.is_empty() {
        vec![0, k / 3, 2 * k / 3, k]
    } else {
        at.to_vec()
    };
    let rep = schedule_report(cfg, &at, batches).map_err(classify)?;
    create_dir(out)?;
    write_file(&out.join("curriculum.csv"), &rep.curriculum_csv())?;
    write_file(&out.join("pmf.csv"), &rep.pmf_csv())?;
    write_file(&out.join("high_noise.csv"), &rep.high_noise_csv())?;
    for r in &rep.high_noise {
        println!(
            "k={} N={} P(sigma>=40): exact {:.4} expected {:.4} empirical {:.4} injected {:.4}",
            r.step, r.n, r.pmf_tail, r.expected, r.empirical, r.injected
        );
    }
    Ok(())
}

const CELLS: [(&str, &str); 4] = [
    ("improved", "lognormal"),
    ("improved", "beta"),
    ("sinusoidal", "lognormal"),
    ("sinusoidal", "beta"),
];

/// Lower is better for distances, higher for PSNR.
fn headline(metrics: &[MetricReport]) -> Option<(&MetricReport, bool)> {
    metrics
        .iter()
        .find(|m| m.name.starts_with("sw_nfe"))
        .map(|m| (m, true))
        .or_else(|| {
            metrics
                .iter()
                .find(|m| m.name.starts_with("psnr_nfe"))
                .map(|m| (m, false))
        })
}

fn cmd_ablate(base: &TrainConfig, seeds: &[u64], out: &Path) -> Outcome {
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    create_dir(out)?;
    let mut csv = String::from("seed,curriculum,sampler,metric,value,steps,status,batches_match\n");
    let mut wins = 0usize;
    for &seed in &seeds {
        let mut first_hashes: Option<Vec<u64>> = None;
        let mut values = Vec::new();
        let mut lines = Vec::new();
        for (curr, samp) in CELLS {
            let dir = out.join(format!("seed-{seed}")).join(format!("{curr}-{samp}"));
            let result = base
                .with(&[
                    ("seed", &seed.to_string()),
                    ("curriculum.kind", curr),
                    ("sampler.kind", samp),
                ])
                .map_err(usage)
                .and_then(|cfg| {
                    create_dir(&dir)?;
                    eprintln!("seed {seed}: {curr} x {samp}");
                    train_into(&cfg, &dir, false, true)
                });
            match result {
                Ok(r) => {
                    let matches = match &first_hashes {
                        None => {
                            first_hashes = Some(r.hashes.clone());
                            true
                        }
                        Some(h) => *h == r.hashes,
                    };
                    let (name, value, lower) = match headline(&r.metrics) {
                        Some((m, lower)) => (m.name.clone(), m.value, lower),
                        None => ("none".into(), f64::NAN, true),
                    };
                    values.push(((curr, samp), value, lower));
                    lines.push(format!(
                        "{seed},{curr},{samp},{name},{value},{},ok,{matches}",
                        base.total_steps
                    ));
                }
                Err(f) => {
                    let msg = f.msg.replace([',', '\n'], ";");
                    lines.push(format!("{seed},{curr},{samp},none,NaN,0,error: {msg},false"));
                }
            }
        }
        for l in lines {
            csv.push_str(&l);
            csv.push('\n');
        }
        let get = |c| values.iter().find(|(k, _, _)| *k == c).map(|&(_, v, lower)| (v, lower));
        if let (Some((sb, lower)), Some((il, _))) = (get(("sinusoidal", "beta")), get(("improved", "lognormal"))) {
            let ok = if lower { sb <= il } else { sb >= il };
            wins += ok as usize;
            println!(
                "seed {seed}: sinusoidal+beta {sb:.5} vs improved+lognormal {il:.5} -> {}",
                if ok { "no worse" } else { "worse" }
            );
        }
        if let Some(best) = values.iter().filter(|(_, v, _)| v.is_finite()).min_by(|a, b| {
            if a.2 {
                a.1.total_cmp(&b.1)
            } else {
                b.1.total_cmp(&a.1)
            }
        }) {
            println!("seed {seed}: best cell {} x {}", best.0 .0, best.0 .1);
        }
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    println!(
        "sinusoidal+beta no worse than improved+lognormal in {wins} of {} seeds",
        seeds.len()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, nfe: Option<usize>, seed: u64, out: &Path) -> Outcome {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let nfe = nfe.unwrap_or(cfg.eval.nfe);
    if nfe < 1 {
        return Err(usage("--nfe must be >= 1"));
    }
    let split = load_data::<f32>(&cfg).map_err(runtime)?;
    let holdout = split
        .holdout
        .ok_or_else(|| usage("the checkpoint's configuration has no held-out data (data.holdout = 0)"))?;
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let metrics = evaluate(&model, &cfg, &split.train, &holdout, nfe, &mut rng).map_err(runtime)?;
    create_dir(out)?;
    write_metrics(&out.join("metrics.csv"), &metrics).map_err(runtime)?;
    for m in &metrics {
        println!("{} = {}", m.name, fmt_metric(m.value));
    }
    Ok(())
}
