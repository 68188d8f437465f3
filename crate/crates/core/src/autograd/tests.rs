use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

type Builder = dyn Fn(&mut Graph<'_, f64>, &[ParamId]) -> Var;

/// Central finite differences on every parameter entry against `backward`.
fn check_grads(shapes: &[&[usize]], seed: u64, build: &Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), Tensor::randn(s, &mut rng)))
        .collect();
    let analytic = {
        let mut g = Graph::new(&store);
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::inference(store);
        let loss = build(&mut g, &ids);
        g.value(loss).data()[0]
    };
    let h = 1e-6;
    for (pi, id) in ids.iter().enumerate() {
        for j in 0..store.get(*id).numel() {
            let orig = store.get(*id).data()[j];
            store.get_mut(*id).data_mut()[j] = orig + h;
            let up = eval(&store);
            store.get_mut(*id).data_mut()[j] = orig - h;
            let down = eval(&store);
            store.get_mut(*id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pi].data()[j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-5, "param {pi}[{j}]: fd {fd} vs analytic {an}");
        }
    }
}

/// Reduces any tensor to a scalar with a fixed, non-uniform weighting.
fn weighted_sum(g: &mut Graph<'_, f64>, v: Var) -> Var {
    let n = g.value(v).numel();
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.mean(p)
}

#[test]
fn elementwise_ops() {
    check_grads(&[&[2, 3], &[2, 3]], 1, &|g, p| {
        let a = g.param(p[0]);
        let b = g.param(p[1]);
        let s = g.add(a, b).unwrap();
        let d = g.sub(s, b).unwrap();
        let m = g.mul(d, b).unwrap();
        let q = g.square(m);
        let r = g.relu(m);
        let q = g.add(q, r).unwrap();
        let e = g.silu(q);
        let f = g.sigmoid(e);
        let f = g.scale(f, 1.7);
        let f = g.scale_rows(f, &[0.5, -2.0]).unwrap();
        weighted_sum(g, f)
    });
}

#[test]
fn linear_op() {
    check_grads(&[&[3, 4], &[5, 4], &[5]], 2, &|g, p| {
        let x = g.param(p[0]);
        let w = g.param(p[1]);
        let b = g.param(p[2]);
        let y = g.linear(x, w, Some(b)).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn conv_ops() {
    check_grads(&[&[2, 3, 4, 6], &[4, 3, 3, 3], &[4], &[2, 4, 1, 1]], 3, &|g, p| {
        let x = g.param(p[0]);
        let w = g.param(p[1]);
        let b = g.param(p[2]);
        let w1 = g.param(p[3]);
        let y = g.conv2d(x, w, Some(b)).unwrap();
        let y = g.conv2d(y, w1, None).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn resampling_and_concat() {
    check_grads(&[&[2, 2, 4, 4], &[2, 1, 2, 2]], 4, &|g, p| {
        let x = g.param(p[0]);
        let y = g.param(p[1]);
        let d = g.avg_pool2(x).unwrap();
        let c = g.concat(d, y).unwrap();
        let u = g.upsample2(c).unwrap();
        weighted_sum(g, u)
    });
}

#[test]
fn channel_broadcasts() {
    check_grads(&[&[2, 3, 2, 2], &[2, 3], &[2, 1, 2, 2]], 5, &|g, p| {
        let x = g.param(p[0]);
        let b = g.param(p[1]);
        let m = g.param(p[2]);
        let y = g.add_channel(x, b).unwrap();
        let y = g.mul_broadcast(y, m).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn group_norm_op() {
    check_grads(&[&[2, 4, 3, 3], &[4], &[4]], 6, &|g, p| {
        let x = g.param(p[0]);
        let ga = g.param(p[1]);
        let be = g.param(p[2]);
        let y = g.group_norm(x, ga, be, 2).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn bmm_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check_grads(&[sa, sb], 7, &move |g, p| {
            let a = g.param(p[0]);
            let b = g.param(p[1]);
            let c = g.bmm(a, ta, b, tb).unwrap();
            let c = g.softmax(c);
            weighted_sum(g, c)
        });
    }
}

#[test]
fn reshape_and_pseudo_huber() {
    let target = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
    check_grads(&[&[3, 2, 2]], 8, &move |g, p| {
        let x = g.param(p[0]);
        let r = g.reshape(x, &[3, 4]).unwrap();
        g.pseudo_huber(r, &target, &[1.0, 0.5, 2.0], 0.3).unwrap()
    });
}

#[test]
fn inference_graph_yields_zero_grads() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::<f64>::full(&[2], 1.0));
    let mut g = Graph::inference(&store);
    let w = g.param(id);
    let s = g.square(w);
    let m = g.mean(s);
    assert!(!g.requires_grad(m));
    let grads = g.backward(m).unwrap();
    assert_eq!(grads[0].data(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient_but_params_do() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::<f64>::full(&[1, 2], 2.0));
    let mut g = Graph::new(&store);
    let w = g.param(id);
    let x = g.constant(Tensor::full(&[1, 2], 3.0));
    let y = g.mul(w, x).unwrap();
    let m = g.mean(y);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads[0].data(), &[1.5, 1.5]);
}

#[test]
fn shape_errors_are_reported() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
    assert!(g.conv2d(a, b, None).is_err());
}
