use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;

fn small_net() -> NetConfig {
    NetConfig {
        res_blocks_per_stage: 1,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_resolutions: vec![4],
        dropout: 0.0,
    }
}

fn image_batch(b: usize, c: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(&[b, c, s, s], rng)
}

#[test]
fn mlp_maps_points_to_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model: Model<f64> = build_mlp(&[16, 16], 2, 8, &mut rng).unwrap();
    let x = Tensor::randn(&[5, 2], &mut rng);
    let y = model.eval(&x, &[0.1, 1.0, 2.0, 40.0, 80.0], None).unwrap();
    assert_eq!(y.shape(), &[5, 2]);
    assert!(y.all_finite());
}

#[test]
fn zeroed_output_layer_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model: Model<f64> = build_mlp(&[8], 3, 4, &mut rng).unwrap();
    model.zero_output();
    let y = model.eval(&Tensor::randn(&[4, 3], &mut rng), &[1.0; 4], None).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut unet: Model<f64> = build_unet(&small_net(), ImageShape::new(1, 8, 8), &mut rng).unwrap();
    unet.zero_output();
    let y = unet.eval(&image_batch(2, 1, 8, &mut rng), &[1.0, 3.0], None).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unet_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = NetConfig {
        res_blocks_per_stage: 1,
        base_channels: 8,
        channel_multipliers: vec![1, 2, 2],
        attention_resolutions: vec![16],
        dropout: 0.1,
    };
    let model: Model<f32> = build_unet(&cfg, ImageShape::new(3, 32, 32), &mut rng).unwrap();
    let x = Tensor::randn(&[1, 3, 32, 32], &mut rng);
    let y = model.eval(&x, &[2.5], None).unwrap();
    assert_eq!(y.shape(), &[1, 3, 32, 32]);
}

#[test]
fn construction_rejects_bad_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = small_net();
    cfg.base_channels = 4;
    assert!(build_unet::<f32, _>(&cfg, ImageShape::new(1, 8, 8), &mut rng).is_err());
    let mut cfg = small_net();
    cfg.res_blocks_per_stage = 0;
    assert!(build_unet::<f32, _>(&cfg, ImageShape::new(1, 8, 8), &mut rng).is_err());
    assert!(build_unet::<f32, _>(&small_net(), ImageShape::new(1, 7, 8), &mut rng).is_err());
    let wag = WagConfig {
        weight: 1.5,
        inter_channels: 4,
    };
    assert!(build_conditional_unet::<f32, _>(&small_net(), &wag, ImageShape::new(1, 8, 8), 1, &mut rng).is_err());
}

#[test]
fn parameter_count_is_deterministic_and_scales_with_width() {
    let cfg = |base| NetConfig {
        res_blocks_per_stage: 2,
        base_channels: base,
        channel_multipliers: vec![1, 2, 2],
        attention_resolutions: vec![16],
        dropout: 0.0,
    };
    let image = ImageShape::new(3, 32, 32);
    let count = |base, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_unet::<f32, _>(&cfg(base), image, &mut rng).unwrap().num_params()
    };
    let n32 = count(32, 1);
    assert_eq!(n32, count(32, 2));
    let ratio = count(64, 1) as f64 / n32 as f64;
    assert!((3.6..4.05).contains(&ratio), "ratio {ratio}");
}

#[test]
fn sigma_embedding_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model: Model<f64> = build_mlp(&[8], 2, 16, &mut rng).unwrap();
    let a = model.sigma_embedding(0.7).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, model.sigma_embedding(0.7).unwrap());
    assert!(model.sigma_embedding(0.0).is_err());
    let f = sigma_features::<f64>(&[1.0, 2.0], 16);
    assert_eq!(f.shape(), &[2, 16]);
}

#[test]
fn wag_saturated_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let cfg0 = WagConfig {
        weight: 0.0,
        inter_channels: 3,
    };
    let wag0 = Wag::new(&mut store, &mut rng, "a", 4, 6, 5, &cfg0);
    let cfg1 = WagConfig {
        weight: 0.8,
        inter_channels: 3,
    };
    let wag1 = Wag::new(&mut store, &mut rng, "b", 4, 6, 5, &cfg1);
    for (wag, bias) in [(&wag0, 100.0), (&wag1, -800.0)] {
        let (w, b) = wag.psi_params();
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b).data_mut().fill(bias);
    }
    let skip = image_batch(2, 4, 4, &mut rng);
    let gate = image_batch(2, 6, 4, &mut rng);
    let cond = image_batch(2, 5, 4, &mut rng);

    let mut g = Graph::inference(&store);
    let (s, ga, c) = (g.constant(skip.clone()), g.constant(gate), g.constant(cond));
    let out = wag_forward(&mut g, &wag0, s, ga, c).unwrap().out;
    assert_eq!(g.value(out), &skip);

    let out = wag_forward(&mut g, &wag1, s, ga, c).unwrap().out;
    let phi = {
        let proj = wag1.phi.forward(&mut g, c).unwrap();
        g.scale(proj, 0.8)
    };
    assert_eq!(g.value(out).max_abs_diff(g.value(phi)), 0.0);
}

#[test]
fn wag_map_bounded_by_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let wag = Wag::new(&mut store, &mut rng, "w", 3, 3, 2, &WagConfig::default());
    for _ in 0..50 {
        let scale = rng.random_range(0.1..20.0);
        let mut g = Graph::inference(&store);
        let s = g.constant(image_batch(1, 3, 4, &mut rng).map(|v| v * scale));
        let ga = g.constant(image_batch(1, 3, 2, &mut rng).map(|v| v * scale));
        let c = g.constant(image_batch(1, 2, 4, &mut rng));
        let o = wag_forward(&mut g, &wag, s, ga, c).unwrap();
        assert_eq!(g.shape(o.out), &[1, 3, 4, 4]);
        for (&m, &p) in g.value(o.map).data().iter().zip(g.value(o.psi).data()) {
            assert!((0.0..=1.0).contains(&m) && m <= p);
        }
    }
    let mut g = Graph::inference(&store);
    let s = g.constant(image_batch(1, 3, 4, &mut rng));
    let ga = g.constant(image_batch(1, 3, 3, &mut rng));
    let c = g.constant(image_batch(1, 2, 4, &mut rng));
    assert!(matches!(
        wag_forward(&mut g, &wag, s, ga, c),
        Err(Error::InvalidArgument(_))
    ));
}

fn perturb(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn conditional_unet_with_zero_weight_ignores_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wag = WagConfig {
        weight: 0.0,
        inter_channels: 4,
    };
    let mut model: Model<f64> =
        build_conditional_unet(&small_net(), &wag, ImageShape::new(1, 8, 8), 1, &mut rng).unwrap();
    perturb(&mut model, &mut rng);
    let x = image_batch(2, 1, 8, &mut rng);
    let a = model
        .eval(&x, &[1.0, 9.0], Some(&image_batch(2, 1, 8, &mut rng)))
        .unwrap();
    let b = model
        .eval(&x, &[1.0, 9.0], Some(&image_batch(2, 1, 8, &mut rng)))
        .unwrap();
    assert_eq!(a, b);

    let mut model: Model<f64> = build_conditional_unet(
        &small_net(),
        &WagConfig::default(),
        ImageShape::new(1, 8, 8),
        1,
        &mut rng,
    )
    .unwrap();
    perturb(&mut model, &mut rng);
    let a = model.eval(&x, &[1.0, 9.0], Some(&x)).unwrap();
    assert!(a.all_finite());
    let b = model
        .eval(&x, &[1.0, 9.0], Some(&image_batch(2, 1, 8, &mut rng)))
        .unwrap();
    assert_ne!(a, b);
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model: Model<f64> = build_conditional_unet(
        &small_net(),
        &WagConfig::default(),
        ImageShape::new(1, 8, 8),
        1,
        &mut rng,
    )
    .unwrap();
    let x = image_batch(1, 1, 8, &mut rng);
    assert!(model.eval(&x, &[1.0], None).is_err());
    assert!(model.eval(&x, &[1.0], Some(&image_batch(1, 1, 4, &mut rng))).is_err());
    assert!(model.eval(&x, &[1.0, 2.0], Some(&x)).is_err());
    assert!(model.eval(&image_batch(1, 2, 8, &mut rng), &[1.0], Some(&x)).is_err());
}

/// Central differences on a random subset of parameter entries.
fn check_model_grads(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    sigmas: &[f64],
    cond: Option<&Tensor<f64>>,
    probes: usize,
    seed: u64,
) {
    let loss_of = |m: &Model<f64>, g: &mut Graph<'_, f64>| {
        let xv = g.constant(x.clone());
        let cv = cond.map(|c| g.constant(c.clone()));
        let y = m.forward(g, xv, sigmas, cv, None).unwrap();
        let w = Tensor::from_vec(
            g.shape(y),
            (0..g.value(y).numel()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect(),
        )
        .unwrap();
        let w = g.constant(w);
        let p = g.mul(y, w).unwrap();
        g.mean(p)
    };
    let grads = {
        let mut g = Graph::new(model.params());
        let l = loss_of(model, &mut g);
        g.backward(l).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    for _ in 0..probes {
        let pi = rng.random_range(0..model.params().len());
        let j = rng.random_range(0..model.params().tensors()[pi].numel());
        let orig = model.params().tensors()[pi].data()[j];
        let mut eval_at = |v: f64| {
            model.params_mut().tensors_mut()[pi].data_mut()[j] = v;
            let mut g = Graph::inference(model.params());
            let l = loss_of(model, &mut g);
            g.value(l).data()[0]
        };
        let fd = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h);
        model.params_mut().tensors_mut()[pi].data_mut()[j] = orig;
        let an = grads[pi].data()[j];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        let name = &model.params().names()[pi];
        assert!(err < 1e-4, "{name}[{j}]: fd {fd} analytic {an}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model: Model<f64> = build_mlp(&[12, 12], 2, 8, &mut rng).unwrap();
    perturb(&mut model, &mut rng);
    let x = Tensor::randn(&[3, 2], &mut rng);
    check_model_grads(&mut model, &x, &[0.01, 1.0, 70.0], None, 200, 11);
}

#[test]
fn conditional_unet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model: Model<f64> = build_conditional_unet(
        &small_net(),
        &WagConfig::default(),
        ImageShape::new(1, 8, 8),
        1,
        &mut rng,
    )
    .unwrap();
    perturb(&mut model, &mut rng);
    let x = image_batch(2, 1, 8, &mut rng);
    let c = image_batch(2, 1, 8, &mut rng);
    check_model_grads(&mut model, &x, &[0.5, 20.0], Some(&c), 60, 13);
}

#[test]
fn checkpoint_round_trip_and_diff() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let spec = NetSpec::CondUNet {
        image: ImageShape::new(1, 8, 8),
        cond_channels: 1,
        net: small_net(),
        wag: WagConfig::default(),
    };
    let model: Model<f32> = Model::build(spec.clone(), &mut rng).unwrap();
    let mut ck = Checkpoint::new();
    for (k, v) in spec.to_meta() {
        ck.set_meta(&k, v);
    }
    ck.set_meta("step", 17);
    ck.push_store("student", model.params());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(NetSpec::from_meta(&back.meta).unwrap(), spec);

    let mut other: Model<f32> = Model::build(spec, &mut rng).unwrap();
    back.load_store("student", other.params_mut()).unwrap();
    assert_eq!(other.params(), model.params());

    let wrong: Model<f32> = build_mlp(&[4], 2, 4, &mut rng).unwrap();
    match back.read_like("student", wrong.params()) {
        Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains("mlp.out.w")),
        other => panic!("expected mismatch, got {:?}", other.map(|_| ())),
    }

    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
    assert!(Checkpoint::from_bytes(b"garbage\nend\n", &path).is_err());
}
