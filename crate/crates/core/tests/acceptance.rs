//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when a hard criterion fails. Criterion 7 only reports.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clab::consistency::{ct_loss, BoundaryScalings, ConsistencyFunction, CtBatch, HuberConfig, Weighting};
use clab::curriculum::{improved_n, sinusoidal_n, CurriculumConfig, CurriculumKind};
use clab::eval::{evaluate, MetricReport};
use clab::network::{build_conditional_unet, build_mlp, ImageShape, NetConfig, WagConfig};
use clab::schedules::{
    beta_index_pmf, beta_tail_mass, inject_high_noise, karras_grid, lognormal_index_pmf, sample_beta_indices,
    sample_beta_unit, sample_lognormal, sinusoidal_grid, BetaParams, HighNoiseInjection, LognormalParams, NoiseRange,
};
use clab::train::{load_data, stream_rng, train_loop, LoopOptions, TrainConfig, EVAL_STREAM};
use clab::{Model, Real, Tensor};

mod common;
use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Verdict, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn perturb<T: Real>(model: &mut Model<T>, scale: f64, rng: &mut ChaCha8Rng) {
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = T::of(v.as_f64() + scale * rng.random_range(-1.0..1.0));
        }
    }
}

fn small_unet() -> NetConfig {
    NetConfig {
        res_blocks_per_stage: 1,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_resolutions: vec![4],
        dropout: 0.0,
    }
}

fn boundary_pair<T: Real>(model: &Model<T>, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let f = ConsistencyFunction::new(model, BoundaryScalings::default(), NoiseRange::default());
    let mut shape = vec![rng.random_range(1..5)];
    shape.extend(model.sample_shape());
    let scale = T::of(rng.random_range(0.1..3.0));
    let x = Tensor::<T>::randn(&shape, rng).map(|v| v * scale);
    let cond = model.spec().cond_shape().map(|mut s| {
        s.insert(0, shape[0]);
        Tensor::<T>::randn(&s, rng)
    });
    let sig = vec![f.range.sigma_min; shape[0]];
    let y = f.eval(&x, &sig, cond.as_ref()).map_err(err)?;
    Ok(y.max_abs_diff(&x))
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for net in 0..200 {
        if net % 20 == 19 {
            let mut m: Model<f32> = build_conditional_unet(
                &small_unet(),
                &WagConfig::default(),
                ImageShape::new(1, 8, 8),
                1,
                &mut rng,
            )
            .map_err(err)?;
            perturb(&mut m, 0.05, &mut rng);
            for _ in 0..5 {
                worst = worst.max(boundary_pair(&m, &mut rng)?);
                pairs += 1;
            }
            continue;
        }
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..24)).collect();
        let dim = rng.random_range(1..5);
        if net % 2 == 0 {
            let mut m: Model<f32> = build_mlp(&hidden, dim, 8, &mut rng).map_err(err)?;
            perturb(&mut m, 0.5, &mut rng);
            for _ in 0..5 {
                worst = worst.max(boundary_pair(&m, &mut rng)?);
            }
        } else {
            let mut m: Model<f64> = build_mlp(&hidden, dim, 8, &mut rng).map_err(err)?;
            perturb(&mut m, 0.5, &mut rng);
            for _ in 0..5 {
                worst = worst.max(boundary_pair(&m, &mut rng)?);
            }
        }
        pairs += 5;
    }
    Ok(verdict(
        pairs >= 1000 && worst <= 1e-6,
        format!("{pairs} (x, net) pairs, max |f(x, sigma_min) - x| = {worst:e}"),
    ))
}

fn criterion_2() -> Check {
    let mut hp = Hp::new();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut w_karras, mut w_sin): (f64, f64) = (0.0, 0.0);
    let mut curriculum_mismatch = 0;
    for trial in 0..1000 {
        let smin = 10f64.powf(rng.random_range(-4.0..0.0));
        let smax = smin * 10f64.powf(rng.random_range(0.1..5.0));
        let rho = rng.random_range(1.0..10.0);
        let n = rng.random_range(2..3000);
        let i = rng.random_range(0..n);
        let range = NoiseRange::new(smin, smax, rho).map_err(err)?;
        let k = karras_grid(&range, n).map_err(err)?.sigmas()[i];
        w_karras = w_karras.max(rel_err(k, karras_oracle(&mut hp, smin, smax, rho, n, i)));
        let s = sinusoidal_grid(&range, n).map_err(err)?.sigmas()[i];
        w_sin = w_sin.max(rel_err(s, sinusoidal_oracle(&mut hp, smin, smax, n, i)));

        let s0 = rng.random_range(1..200);
        let s1 = s0 + rng.random_range(1..3000);
        let mut total = rng.random_range(1..1_000_000u64);
        let step = if trial % 10 == 0 {
            total = 9 * (total / 9).max(1);
            total / 9 * rng.random_range(0..=9u64)
        } else {
            rng.random_range(0..=total)
        };
        let imp = CurriculumConfig::new(s0, s1, total, CurriculumKind::Improved).map_err(err)?;
        let sin = CurriculumConfig::new(s0, s1, total, CurriculumKind::Sinusoidal).map_err(err)?;
        if improved_n(step, &imp).map_err(err)? != improved_oracle(&mut hp, step, s0, s1, total) {
            curriculum_mismatch += 1;
        }
        if sinusoidal_n(step, &sin).map_err(err)? != sinusoidal_n_oracle(&mut hp, step, s0, s1, total).max(2) {
            curriculum_mismatch += 1;
        }
    }
    let mut anchors = Vec::new();
    for total in [300u64, 6000, 400_002] {
        let cfg = CurriculumConfig::new(20, 250, total, CurriculumKind::Sinusoidal).map_err(err)?;
        for k in [0, total / 3, 2 * total / 3, total] {
            anchors.push(sinusoidal_n(k, &cfg).map_err(err)?);
        }
    }
    let anchors_ok = anchors.chunks(4).all(|c| c == [21, 251, 21, 231]);
    Ok(verdict(
        w_karras <= 1e-9 && w_sin <= 1e-9 && curriculum_mismatch == 0 && anchors_ok,
        format!(
            "1000 points: karras rel err {w_karras:.1e}, sinusoidal rel err {w_sin:.1e}, \
             {curriculum_mismatch} curriculum mismatches, anchors {:?}",
            &anchors[..4]
        ),
    ))
}

fn criterion_3() -> Check {
    let range = NoiseRange::default();
    let grid = karras_grid(&range, 251).map_err(err)?;
    let ln = LognormalParams::default();
    let pmf = lognormal_index_pmf(&grid, &ln);
    let draws = sample_lognormal(&grid, &ln, 100_000, &mut ChaCha8Rng::seed_from_u64(103)).map_err(err)?;
    let p_ln = chi2_p(&histogram(&draws, pmf.len()), &pmf);

    let bp = BetaParams::new(0.5, 5.0).map_err(err)?;
    let pmf = beta_index_pmf(&grid, &bp);
    let draws = sample_beta_indices(&grid, &bp, 100_000, &mut ChaCha8Rng::seed_from_u64(104)).map_err(err)?;
    let p_beta = chi2_p(&histogram(&draws, pmf.len()), &pmf);

    let u40 = (40.0 - range.sigma_min) / range.span();
    // Substituting x = t² makes the Beta(0.5, 5) integrand smooth.
    let kernel = |t: f64| 2.0 * (1.0 - t * t).powi(4);
    let quad = simpson(kernel, u40.sqrt(), 1.0, 20_000) / simpson(kernel, 0.0, 1.0, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let hits = (0..100_000)
        .filter(|_| range.sigma_min + sample_beta_unit(&bp, &mut rng) * range.span() >= 40.0)
        .count();
    let frac = hits as f64 / 100_000.0;
    let closed = beta_tail_mass(u40, &bp);
    Ok(verdict(
        p_ln > 0.01 && p_beta > 0.01 && (frac - quad).abs() <= 0.005 && (closed - quad).abs() <= 1e-9,
        format!(
            "chi2 p lognormal {p_ln:.3}, beta {p_beta:.3}; P(sigma >= 40) sampled {:.2}%, quadrature {:.2}% \
             (reference figure: up to 4%)",
            100.0 * frac,
            100.0 * quad
        ),
    ))
}

/// Relative L2 error between the analytic gradient and central differences
/// over `probes` parameter entries.
fn grad_check(mut model: Model<f64>, batch: &CtBatch<f64>, probes: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    perturb(&mut model, 0.1, rng);
    let teacher = model.params().clone();
    let huber = HuberConfig::new(0.05).map_err(err)?;
    let loss = |m: &Model<f64>| -> Result<f64, String> {
        let f = ConsistencyFunction::new(m, BoundaryScalings::default(), NoiseRange::default());
        Ok(ct_loss(&f, &teacher, batch, &huber, Weighting::Improved, None)
            .map_err(err)?
            .loss)
    };
    let f = ConsistencyFunction::new(&model, BoundaryScalings::default(), NoiseRange::default());
    let grads = ct_loss(&f, &teacher, batch, &huber, Weighting::Improved, None)
        .map_err(err)?
        .grads;
    let entries: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.data().len()).map(move |j| (t, j)))
        .collect();
    let picks: Vec<(usize, usize)> = if entries.len() <= probes {
        entries
    } else {
        (0..probes)
            .map(|_| entries[rng.random_range(0..entries.len())])
            .collect()
    };
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (t, j) in picks {
        let orig = model.params().tensors()[t].data()[j];
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig + h;
        let up = loss(&model)?;
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig - h;
        let down = loss(&model)?;
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads[t].data()[j];
        diff += (fd - an) * (fd - an);
        norm += fd * fd;
    }
    Ok(diff.sqrt() / norm.sqrt().max(1e-12))
}

fn random_batch(dims: &[usize], cond: Option<&[usize]>, rng: &mut ChaCha8Rng) -> Result<CtBatch<f64>, String> {
    let b = rng.random_range(1..4);
    let mut shape = vec![b];
    shape.extend_from_slice(dims);
    let grid = karras_grid(&NoiseRange::default(), rng.random_range(3..60)).map_err(err)?;
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..grid.num_pairs())).collect();
    let c = cond.map(|c| {
        let mut s = vec![b];
        s.extend_from_slice(c);
        Tensor::randn(&s, rng)
    });
    let x0 = Tensor::<f64>::uniform(&shape, 1.0, rng);
    let z = Tensor::randn(&shape, rng);
    CtBatch::from_indices(x0, z, &grid, &idx, c).map_err(err)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    let configs = 24;
    for c in 0..configs {
        let err_c = if c % 6 == 5 {
            let model: Model<f64> = build_conditional_unet(
                &small_unet(),
                &WagConfig::default(),
                ImageShape::new(1, 8, 8),
                1,
                &mut rng,
            )
            .map_err(err)?;
            let batch = random_batch(&[1, 8, 8], Some(&[1, 8, 8]), &mut rng)?;
            grad_check(model, &batch, 40, &mut rng)?
        } else {
            let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..12)).collect();
            let dim = rng.random_range(1..4);
            let model: Model<f64> = build_mlp(&hidden, dim, 8, &mut rng).map_err(err)?;
            let batch = random_batch(&[dim], None, &mut rng)?;
            grad_check(model, &batch, usize::MAX, &mut rng)?
        };
        worst = worst.max(err_c);
    }
    Ok(verdict(
        worst <= 1e-4,
        format!("{configs} model configurations, worst relative gradient error {worst:.2e}"),
    ))
}

fn criterion_5() -> Check {
    let grid = karras_grid(&NoiseRange::default(), 251).map_err(err)?;
    let bp = BetaParams::new(0.5, 5.0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut counts = Vec::new();
    let mut in_range = true;
    for ratio in [0.0, 0.02, 0.03, 0.04, 0.05] {
        let idx = sample_beta_indices(&grid, &bp, 100, &mut rng).map_err(err)?;
        let base: Vec<f64> = idx.iter().map(|&i| grid.pair(i).1).collect();
        let inj = HighNoiseInjection::new(ratio, 40.0, 80.0).map_err(err)?;
        let out = inject_high_noise(&base, &inj, &mut rng).map_err(err)?;
        let changed: Vec<f64> = out.iter().zip(&base).filter(|(a, b)| a != b).map(|(a, _)| *a).collect();
        in_range &= changed.iter().all(|s| (40.0..=80.0).contains(s));
        counts.push(changed.len());
    }
    Ok(verdict(
        counts == [0, 2, 3, 4, 5] && in_range,
        format!("replaced counts {counts:?} for ratios 0..0.05 at batch 100, injected sigma in [40, 80]: {in_range}"),
    ))
}

fn metric(reports: &[MetricReport], name: &str) -> Result<f64, String> {
    reports
        .iter()
        .find(|m| m.name == name)
        .map(|m| m.value)
        .ok_or_else(|| format!("metric {name} missing"))
}

struct ToyRun {
    sw: f64,
    baseline: f64,
    mode_min: f64,
    sw2: f64,
    secs: f64,
}

fn toy_run(overrides: &[(&str, &str)]) -> Result<ToyRun, String> {
    let cfg = TrainConfig::from_layers(Some("toy2d"), &[])
        .and_then(|c| c.with(overrides))
        .map_err(err)?;
    let split = load_data::<f32>(&cfg).map_err(err)?;
    let holdout = split.holdout.as_ref().ok_or("toy preset has no holdout")?;
    let start = Instant::now();
    let opts = LoopOptions {
        out_dir: None,
        resume: false,
        stop_after: None,
        on_step: None,
    };
    let out = train_loop(&cfg, &split.train, opts).map_err(err)?;
    let model = &out.state.model;
    let one = evaluate(
        model,
        &cfg,
        &split.train,
        holdout,
        1,
        &mut stream_rng(cfg.seed, EVAL_STREAM),
    )
    .map_err(err)?;
    let two = evaluate(
        model,
        &cfg,
        &split.train,
        holdout,
        2,
        &mut stream_rng(cfg.seed, EVAL_STREAM),
    )
    .map_err(err)?;
    Ok(ToyRun {
        sw: metric(&one, "sw_nfe1")?,
        baseline: metric(&one, "sw_baseline")?,
        mode_min: metric(&one, "mode_min_frac")?,
        sw2: metric(&two, "sw_nfe2")?,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_6(first: &mut Option<ToyRun>) -> Check {
    let cfg = TrainConfig::from_layers(Some("toy2d"), &[]).map_err(err)?;
    let run = toy_run(&[])?;
    let pass = cfg.total_steps <= 20_000
        && cfg.batch_size == 256
        && run.sw <= 2.0 * run.baseline
        && run.mode_min >= 0.02
        && run.secs <= 15.0 * 60.0;
    let detail = format!(
        "{} steps, batch {}: SW2 nfe1 {:.4} vs baseline {:.4} (ratio {:.2}, nfe2 {:.4}), min mode share {:.3}, {:.0}s",
        cfg.total_steps,
        cfg.batch_size,
        run.sw,
        run.baseline,
        run.sw / run.baseline,
        run.sw2,
        run.mode_min,
        run.secs
    );
    *first = Some(run);
    Ok(verdict(pass, detail))
}

fn criterion_7(seed0: Option<ToyRun>) -> Check {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let s = seed.to_string();
        let ours = match (&seed0, seed) {
            (Some(r), 0) => r.sw,
            _ => toy_run(&[("seed", &s)])?.sw,
        };
        let base = toy_run(&[
            ("seed", &s),
            ("curriculum.kind", "improved"),
            ("sampler.kind", "lognormal"),
        ])?
        .sw;
        if ours <= base {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {ours:.4} vs {base:.4}"));
    }
    Ok(verdict(
        wins >= 2,
        format!(
            "sinusoidal+beta vs improved+lognormal SW2 nfe1, {}; no worse in {wins}/3",
            rows.join(", ")
        ),
    ))
}

fn criterion_8() -> Check {
    let cfg = TrainConfig::from_layers(Some("phantom64"), &[]).map_err(err)?;
    let split = load_data::<f32>(&cfg).map_err(err)?;
    let holdout = split.holdout.as_ref().ok_or("phantom preset has no holdout")?;
    let start = Instant::now();
    let opts = LoopOptions {
        out_dir: None,
        resume: false,
        stop_after: None,
        on_step: None,
    };
    let out = train_loop(&cfg, &split.train, opts).map_err(err)?;
    let m = evaluate(
        &out.state.model,
        &cfg,
        &split.train,
        holdout,
        1,
        &mut stream_rng(cfg.seed, EVAL_STREAM),
    )
    .map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let (pd, pl) = (metric(&m, "psnr_nfe1")?, metric(&m, "psnr_low_dose")?);
    let (sd, sl) = (metric(&m, "ssim_nfe1")?, metric(&m, "ssim_low_dose")?);
    Ok(verdict(
        cfg.total_steps <= 30_000 && pd >= pl + 2.0 && sd > sl && secs <= 3600.0,
        format!(
            "{} steps, {} held-out images: PSNR {pd:.2} dB vs low dose {pl:.2} dB (gain {:.2}), \
             SSIM {sd:.4} vs {sl:.4}, {secs:.0}s",
            cfg.total_steps,
            holdout.len(),
            pd - pl
        ),
    ))
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let off = WagConfig {
        weight: 0.0,
        ..WagConfig::default()
    };
    let image = ImageShape::new(1, 16, 16);
    let mut model: Model<f32> = build_conditional_unet(&small_unet(), &off, image, 1, &mut rng).map_err(err)?;
    perturb(&mut model, 0.05, &mut rng);
    let mut identical = 0;
    for _ in 0..100 {
        let x = Tensor::<f32>::randn(&[1, 1, 16, 16], &mut rng);
        let sigma = [0.002 * (80.0f64 / 0.002).powf(rng.random_range(0.0..1.0))];
        let a = model
            .eval(&x, &sigma, Some(&Tensor::randn(&[1, 1, 16, 16], &mut rng)))
            .map_err(err)?;
        let b = model
            .eval(&x, &sigma, Some(&Tensor::randn(&[1, 1, 16, 16], &mut rng)))
            .map_err(err)?;
        if a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()) {
            identical += 1;
        }
    }
    Ok(verdict(
        identical == 100,
        format!("{identical}/100 condition swaps left the output bitwise unchanged"),
    ))
}

fn criterion_10() -> Check {
    let cfg = TrainConfig::from_layers(Some("toy2d"), &[])
        .and_then(|c| c.with(&[("total_steps", "100"), ("checkpoint_every", "50")]))
        .map_err(err)?;
    let split = load_data::<f32>(&cfg).map_err(err)?;
    let run = |dir: Option<std::path::PathBuf>, resume: bool, stop: Option<u64>| {
        let opts = LoopOptions {
            out_dir: dir,
            resume,
            stop_after: stop,
            on_step: None,
        };
        train_loop(&cfg, &split.train, opts).map_err(err)
    };
    let a = run(None, false, None)?;
    let b = run(None, false, None)?;
    let same_log = a.log.records == b.log.records;

    let dir = tempfile::tempdir().map_err(err)?;
    let first = run(Some(dir.path().to_path_buf()), false, Some(50))?;
    let resumed = run(Some(dir.path().to_path_buf()), true, None)?;
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.params()
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let same_params = bits(&resumed.state.model) == bits(&a.state.model);
    let same_tail = resumed.log.to_csv() == a.log.to_csv();
    Ok(verdict(
        same_log && same_params && same_tail && first.log.len() == 50 && a.log.len() == 100,
        format!(
            "100-step RunLogs identical: {same_log}; resume at step 50 bitwise equal parameters: {same_params}, \
             RunLog: {same_tail}"
        ),
    ))
}

fn main() {
    // Cargo passes harness flags such as `--nocapture`; a name filter
    // selects criteria by number.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());

    let mut toy: Option<ToyRun> = None;
    let mut hard_failures = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut toy),
            7 => criterion_7(toy.take()),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        let secs = start.elapsed().as_secs_f64();
        let soft = n == 7;
        let (tag, detail) = match result {
            Ok(v) if v.pass => ("PASS", v.detail),
            Ok(v) => (if soft { "FAIL (reported only)" } else { "FAIL" }, v.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            hard_failures += 1;
        }
        println!("criterion {n:>2}: {tag} - {detail} [{secs:.1}s]");
    }
    if hard_failures > 0 {
        println!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
