use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use quantlab::ground_truth::{
    calibrate_quantifier_model, canonical_ratios, enumerate_combinations, label_scene, Combination,
};
use quantlab::model::{images_to_tensor, BatchInput, EncoderSpec, Model, ModelConfig, ModelVariant};
use quantlab::numeric::{Graph, LayerKind, LayerSpec, ParamStore, Tensor};
use quantlab::rng::seeded;
use quantlab::scene::{compose_scene, rasterize, render_sprite, SpriteSize, SpriteVariant};
use rand::Rng;

fn conv(c: &mut Criterion) {
    let g = Graph::new(vec![LayerSpec::new("c", LayerKind::Conv3x3 { in_ch: 16, out_ch: 32 })]);
    let mut ps = ParamStore::new();
    let mut rng = seeded(1);
    g.init_params(&mut ps, &mut rng);
    let x = Tensor::from_vec(&[8, 50, 50, 16], (0..8 * 50 * 50 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("conv3x3 16->32 forward 8x50x50", |b| b.iter(|| g.forward(&ps, black_box(x.clone())).unwrap()));
    let acts = g.forward(&ps, x.clone()).unwrap();
    let grad = Tensor::filled(acts.output().shape(), 0.01);
    c.bench_function("conv3x3 16->32 backward 8x50x50", |b| {
        b.iter_batched(
            || ps.clone(),
            |mut p| g.backward(&mut p, &acts, grad.clone(), true).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn training_step(c: &mut Criterion) {
    let qm = calibrate_quantifier_model().unwrap();
    let labels = label_scene(Combination::new(3, 12), &qm).unwrap();
    let cfg = ModelConfig {
        encoder: EncoderSpec { image_size: 60, conv1: 8, conv2: 16, dim: 32 },
        ..ModelConfig::default()
    };
    let model = Model::build(ModelVariant::MultiTaskProp, cfg).unwrap();
    let params = model.init_params(&mut seeded(1));
    let img = vec![128u8; 60 * 60];
    let imgs: Vec<&[u8]> = (0..32).map(|_| img.as_slice()).collect();
    let x = BatchInput::Images(images_to_tensor(&imgs, 60).unwrap());
    let ls: Vec<_> = (0..32).map(|_| &labels).collect();
    c.bench_function("multi-task-prop step, 32 images 60px", |b| {
        b.iter_batched(
            || params.clone(),
            |mut p| {
                model.accumulate(&mut p, &x, &ls, &[1.0, 1.0, 1.0]).unwrap();
                p.sgd_step(0.01).unwrap();
            },
            BatchSize::LargeInput,
        )
    });
}

fn scenes(c: &mut Criterion) {
    let v = SpriteVariant::from_class_index(17).unwrap();
    c.bench_function("render sprite 18px", |b| b.iter(|| render_sprite(black_box(&v), SpriteSize::Big, false, 20).unwrap()));
    let ratio = canonical_ratios()[4];
    let spec = compose_scene(ratio, enumerate_combinations(ratio)[0], 7).unwrap();
    c.bench_function("rasterize 100px scene", |b| b.iter(|| rasterize(black_box(&spec), 100, 100).unwrap()));
}

fn quantifiers(c: &mut Criterion) {
    c.bench_function("calibrate quantifier model", |b| b.iter(|| calibrate_quantifier_model().unwrap()));
    let qm = calibrate_quantifier_model().unwrap();
    c.bench_function("label scene", |b| b.iter(|| label_scene(black_box(Combination::new(5, 10)), &qm).unwrap()));
}

criterion_group!(benches, conv, training_step, scenes, quantifiers);
criterion_main!(benches);
