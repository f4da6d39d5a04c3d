//! Finite-difference verification of every layer kind's backward pass.

mod common;

use common::*;
use quantlab::numeric::{cross_entropy, cross_entropy_grad, Graph, LayerKind, ParamStore, Tensor};
use quantlab::rng::seeded;
use rand::Rng;

#[test]
fn every_layer_kind_on_random_shapes() {
    let mut rng = seeded(2024);
    let mut total = 0;
    for trial in 0..4u64 {
        let cases = layer_cases(&mut rng);
        for (g, shape) in cases {
            let (checked, failures) = check_graph(&g, &shape, 100 + trial);
            assert!(failures.is_empty(), "{:?} on {shape:?}: {failures:#?}", g.layers()[0].kind);
            total += checked;
        }
    }
    assert!(total > 200);
}

#[test]
fn toy_network_all_parameters() {
    for seed in 0..3 {
        let (checked, failures) = check_graph(&toy_graph(), &[2, 4, 4, 1], seed);
        assert!(failures.is_empty(), "{failures:#?}");
        assert!(checked > 50);
    }
}

#[test]
fn cross_entropy_gradient_wrt_logits() {
    let mut rng = seeded(5);
    let g = Graph::new(vec![l("s", LayerKind::Softmax)]);
    for _ in 0..10 {
        let logits = random_input(&[3, 9], &mut rng);
        let mut target = Tensor::zeros(&[3, 9]);
        for row in target.data_mut().chunks_exact_mut(9) {
            row.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ps = ParamStore::new();
        let acts = g.forward(&ps, logits.clone()).unwrap();
        let dlogits = g
            .backward(&mut ParamStore::new(), &acts, cross_entropy_grad(acts.output(), &target).unwrap(), true)
            .unwrap()
            .unwrap();
        // closed form: (softmax − target) / rows
        for i in 0..logits.len() {
            let closed = (acts.output().data()[i] - target.data()[i]) / 3.0;
            assert!((dlogits.data()[i] - closed).abs() < 1e-12);
            let mut plus = logits.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= STEP;
            let f = |x: Tensor| cross_entropy(g.forward(&ps, x).unwrap().output(), &target).unwrap();
            let numeric = (f(plus) - f(minus)) / (2.0 * STEP);
            assert!(rel_err(dlogits.data()[i], numeric) < REL_TOL);
        }
    }
}

#[test]
fn backward_accumulates_linearly() {
    let g = toy_graph();
    let mut rng = seeded(9);
    let mut ps = ParamStore::new();
    g.init_params(&mut ps, &mut rng);
    let x = random_input(&[2, 4, 4, 1], &mut rng);
    let acts = g.forward(&ps, x).unwrap();
    let target = Tensor::filled(&[2, 3], 1.0 / 3.0);
    let grad = cross_entropy_grad(acts.output(), &target).unwrap();
    g.backward(&mut ps, &acts, grad.clone(), false).unwrap();
    let once = ps.clone();
    g.backward(&mut ps, &acts, grad, false).unwrap();
    for ((_, a), (_, b)) in once.iter().zip(ps.iter()) {
        for (x1, x2) in a.grad.data().iter().zip(b.grad.data()) {
            assert!((2.0 * x1 - x2).abs() <= 1e-12 * x2.abs().max(1.0));
        }
    }
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let g = toy_graph();
    let mut rng = seeded(1);
    let mut ps = ParamStore::new();
    g.init_params(&mut ps, &mut rng);
    ps.insert("detached.weight", Tensor::filled(&[2, 2], 0.5));
    let acts = g.forward(&ps, random_input(&[1, 4, 4, 1], &mut rng)).unwrap();
    let t = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    g.backward(&mut ps, &acts, cross_entropy_grad(acts.output(), &t).unwrap(), false)
        .unwrap();
    assert!(ps.get("detached.weight").unwrap().grad.data().iter().all(|&v| v == 0.0));
    assert!(ps.get("conv.weight").unwrap().grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn sgd_on_toy_graph_decreases_windowed_loss() {
    let g = toy_graph();
    let mut rng = seeded(77);
    let mut ps = ParamStore::new();
    g.init_params(&mut ps, &mut rng);
    let x = random_input(&[8, 4, 4, 1], &mut rng);
    let mut t = Tensor::zeros(&[8, 3]);
    for i in 0..8 {
        t.data_mut()[i * 3 + i % 3] = 1.0;
    }
    let mut losses = Vec::new();
    for _ in 0..200 {
        let acts = g.forward(&ps, x.clone()).unwrap();
        losses.push(cross_entropy(acts.output(), &t).unwrap());
        let grad = cross_entropy_grad(acts.output(), &t).unwrap();
        g.backward(&mut ps, &acts, grad, false).unwrap();
        ps.sgd_step(0.1).unwrap();
    }
    let windows: Vec<f64> = losses.chunks(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    assert!(windows.last().unwrap() < &windows[0]);
}

#[test]
fn forward_backward_is_bit_deterministic() {
    let run = || {
        let g = toy_graph();
        let mut rng = seeded(3);
        let mut ps = ParamStore::new();
        g.init_params(&mut ps, &mut rng);
        let acts = g.forward(&ps, random_input(&[4, 4, 4, 1], &mut rng)).unwrap();
        let t = Tensor::filled(&[4, 3], 1.0 / 3.0);
        g.backward(&mut ps, &acts, cross_entropy_grad(acts.output(), &t).unwrap(), false)
            .unwrap();
        (acts.into_output(), ps)
    };
    assert_eq!(run(), run());
}
