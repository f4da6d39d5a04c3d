//! Finite-difference helpers shared by the gradient tests.
#![allow(dead_code)]

use quantlab::ground_truth::{calibrate_quantifier_model, label_scene, Combination, TaskLabels};
use quantlab::model::{images_to_tensor, BatchInput, EncoderSpec, Model, ModelConfig, ModelVariant};
use quantlab::numeric::{cross_entropy, cross_entropy_grad, Graph, LayerKind, LayerSpec, ParamStore, Tensor};
use quantlab::rng::seeded;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss used by the checks: a fixed random projection of the output, or
/// cross-entropy against a soft target when the graph ends in softmax.
struct Probe {
    weights: Tensor,
    softmax: bool,
}

impl Probe {
    fn new(graph: &Graph, out_shape: &[usize], rng: &mut impl Rng) -> Self {
        let softmax = matches!(graph.layers().last().map(|l| l.kind), Some(LayerKind::Softmax));
        let mut w = Tensor::zeros(out_shape);
        for v in w.data_mut() {
            *v = rng.gen_range(0.1..1.0);
        }
        if softmax {
            let width = *out_shape.last().unwrap();
            for row in w.data_mut().chunks_exact_mut(width) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Probe { weights: w, softmax }
    }

    fn loss(&self, out: &Tensor) -> f64 {
        if self.softmax {
            cross_entropy(out, &self.weights).unwrap()
        } else {
            out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum()
        }
    }

    fn grad(&self, out: &Tensor) -> Tensor {
        if self.softmax {
            cross_entropy_grad(out, &self.weights).unwrap()
        } else {
            self.weights.clone()
        }
    }
}

/// Inputs bounded away from zero so that relu kinks are not straddled.
pub fn random_input(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Returns (checked, failures).
pub fn check_graph(graph: &Graph, input_shape: &[usize], seed: u64) -> (usize, Vec<String>) {
    let mut rng = seeded(seed);
    let mut params = ParamStore::new();
    graph.init_params(&mut params, &mut rng);
    // nonzero biases so that they matter
    for (_, p) in params.iter_mut() {
        if p.value.shape().len() == 1 {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let input = random_input(input_shape, &mut rng);
    let out_shape = graph.output_shape(input_shape).unwrap();
    let probe = Probe::new(graph, &out_shape, &mut rng);

    let acts = graph.forward(&params, input.clone()).unwrap();
    let dinput = graph
        .backward(&mut params, &acts, probe.grad(acts.output()), true)
        .unwrap()
        .unwrap();

    let eval = |ps: &ParamStore, x: &Tensor| probe.loss(graph.forward(ps, x.clone()).unwrap().output());
    let mut failures = Vec::new();
    let mut checked = 0;

    let paths: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    for path in paths {
        let n = params.value(&path).unwrap().len();
        for i in 0..n {
            let analytic = params.get(&path).unwrap().grad.data()[i];
            let mut plus = params.clone();
            plus.get_mut(&path).unwrap().value.data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(&path).unwrap().value.data_mut()[i] -= STEP;
            let numeric = (eval(&plus, &input) - eval(&minus, &input)) / (2.0 * STEP);
            checked += 1;
            if rel_err(analytic, numeric) >= REL_TOL {
                failures.push(format!("{path}[{i}]: analytic {analytic} numeric {numeric}"));
            }
        }
    }
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(&params, &plus) - eval(&params, &minus)) / (2.0 * STEP);
        let analytic = dinput.data()[i];
        checked += 1;
        if rel_err(analytic, numeric) >= REL_TOL {
            failures.push(format!("input[{i}]: analytic {analytic} numeric {numeric}"));
        }
    }
    (checked, failures)
}

pub fn l(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::new(name, kind)
}

/// The 4×4-image toy network used across the numeric tests.
pub fn toy_graph() -> Graph {
    Graph::new(vec![
        l("conv", LayerKind::Conv3x3 { in_ch: 1, out_ch: 3 }),
        l("relu1", LayerKind::Relu),
        l("pool", LayerKind::MaxPool { window: 2 }),
        l("hidden", LayerKind::Dense { fan_in: 3, fan_out: 4 }),
        l("relu2", LayerKind::Relu),
        l("concat", LayerKind::Concat),
        l("out", LayerKind::Dense { fan_in: 16, fan_out: 3 }),
        l("softmax", LayerKind::Softmax),
    ])
}


pub fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderSpec { image_size: 20, conv1: 3, conv2: 4, dim: 5 },
        stage1_hidden: 6,
        trunk_width: 4,
        head_width: 7,
    }
}

pub fn labels(n: usize) -> Vec<TaskLabels> {
    let qm = calibrate_quantifier_model().unwrap();
    let combos = [(3, 12), (5, 5), (9, 1), (0, 7), (4, 2), (2, 6)];
    (0..n)
        .map(|i| {
            let (t, nt) = combos[i % combos.len()];
            label_scene(Combination::new(t, nt), &qm).unwrap()
        })
        .collect()
}

pub fn images(n: usize, size: usize, seed: u64) -> BatchInput {
    let mut rng = seeded(seed);
    let imgs: Vec<Vec<u8>> = (0..n).map(|_| (0..size * size).map(|_| rng.gen()).collect()).collect();
    let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
    BatchInput::Images(images_to_tensor(&refs, size).unwrap())
}

pub fn grads(model: &Model, params: &ParamStore, input: &BatchInput, labels: &[TaskLabels], w: &[f64]) -> ParamStore {
    let mut ps = params.clone();
    ps.zero_grads();
    let refs: Vec<&TaskLabels> = labels.iter().collect();
    model.accumulate(&mut ps, input, &refs, w).unwrap();
    ps
}

pub fn total_loss(model: &Model, params: &ParamStore, x: &BatchInput, y: &[TaskLabels], w: &[f64]) -> f64 {
    let pass = model.predict(params, x).unwrap();
    let outs: Vec<&Tensor> = (0..model.tasks.len()).map(|k| pass.output(k)).collect();
    let refs: Vec<&TaskLabels> = y.iter().collect();
    model.loss(&outs, &refs, w).unwrap().total
}

/// Positive biases keep tiny relu layers alive; zero biases also put dead
/// units exactly on their kink.
pub fn lift_biases(params: &mut ParamStore, rng: &mut impl Rng) {
    for (path, p) in params.iter_mut() {
        if path.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
        }
    }
}

/// Outcome of the multi-task finite-difference check.
pub struct FdReport {
    pub checked: usize,
    /// Coordinates redrawn because a relu or max-pool kink lay within the
    /// stencil.
    pub redrawn: usize,
    pub failures: Vec<String>,
}

/// Finite-difference check of a multi-task model's weighted loss on 4
/// random coordinates of every parameter, using a 4-point stencil at two
/// step sizes. Where the two estimates disagree the loss is not smooth
/// around the point and the coordinate is redrawn.
pub fn multi_task_fd(variant: ModelVariant, w: &[f64], seed: u64) -> FdReport {
    let model = Model::build(variant, tiny()).unwrap();
    let mut params = model.init_params(&mut seeded(seed));
    let mut rng = seeded(seed + 1);
    lift_biases(&mut params, &mut rng);
    let x = images(2, 20, seed + 2);
    let y = labels(2);
    let analytic = grads(&model, &params, &x, &y, w);
    let loss_at = |path: &str, i: usize, d: f64| {
        let mut ps = params.clone();
        ps.get_mut(path).unwrap().value.data_mut()[i] += d;
        total_loss(&model, &ps, &x, &y, w)
    };
    let stencil = |path: &str, i: usize, h: f64| {
        (-loss_at(path, i, 2.0 * h) + 8.0 * loss_at(path, i, h) - 8.0 * loss_at(path, i, -h) + loss_at(path, i, -2.0 * h))
            / (12.0 * h)
    };
    let mut report = FdReport { checked: 0, redrawn: 0, failures: Vec::new() };
    for (path, p) in analytic.iter() {
        let mut done = 0;
        while done < 4 {
            let i = rng.gen_range(0..p.value.len());
            let coarse = stencil(path, i, 2e-5);
            let numeric = stencil(path, i, 1e-5);
            if (coarse - numeric).abs() > 1e-9 + 1e-6 * numeric.abs() {
                report.redrawn += 1;
                assert!(report.redrawn < 1000, "loss is nowhere smooth");
                continue;
            }
            done += 1;
            report.checked += 1;
            let a = p.grad.data()[i];
            if rel_err(a, numeric) >= REL_TOL {
                report.failures.push(format!("{path}[{i}]: analytic {a} numeric {numeric}"));
            }
        }
    }
    report
}

/// One randomly shaped single-layer graph per layer kind.
pub fn layer_cases(rng: &mut impl Rng) -> Vec<(Graph, Vec<usize>)> {
    let n = rng.gen_range(1..3);
    let h = 2 * rng.gen_range(1..4);
    let w = 2 * rng.gen_range(1..4);
    let c = rng.gen_range(1..4);
    let o = rng.gen_range(1..4);
    let d = rng.gen_range(2..6);
    vec![
        (Graph::new(vec![l("c", LayerKind::Conv3x3 { in_ch: c, out_ch: o })]), vec![n, h, w, c]),
        (Graph::new(vec![l("p", LayerKind::MaxPool { window: 2 })]), vec![n, h, w, c]),
        (Graph::new(vec![l("d", LayerKind::Dense { fan_in: c, fan_out: d })]), vec![n, h, c]),
        (Graph::new(vec![l("r", LayerKind::Relu)]), vec![n, h, c]),
        (Graph::new(vec![l("s", LayerKind::Softmax)]), vec![n, d]),
        (Graph::new(vec![l("k", LayerKind::Concat)]), vec![n, h, w]),
        (Graph::new(vec![l("m", LayerKind::MeanPool)]), vec![n, h, w, c]),
    ]
}
