//! Sequential vs data-parallel throughput on the three hot loops: batch
//! forward evaluation, seed-batch pseudo-gradients, and one full distillation
//! step. With `--no-default-features` the parallel variants degrade to the
//! sequential path and both sides of each group coincide.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use transplant_core::backback::{
    build_graph, distill_loss_and_grad, pseudo_gradient, random_seeds, AlphaMode, LinearPseudoMap,
};
use transplant_core::experiments::presets;
use transplant_core::graph::{AdapterArch, AdapterInit, TeacherNet, TransplantNet};
use transplant_core::layers::PseudoRules;
use transplant_core::parallel::{par_map, seq_map, with_workers};
use transplant_core::shapeworld::{generate, ShapeWorldSpec, Split};
use transplant_core::tensor::{Rng, Shape, Tensor};

struct Fixture {
    teacher: TeacherNet<f32>,
    net: TransplantNet<f32>,
    images: Vec<Tensor<f32>>,
}

fn fixture() -> Fixture {
    let world = ShapeWorldSpec::default();
    let mut rng = Rng::new(41);
    let mut teacher = presets::fresh_teacher::<f32>(
        "disk",
        transplant_core::experiments::TaskKind::Cls,
        &world.image_shape(),
        &mut rng,
    )
    .unwrap();
    teacher.freeze();
    let mut net = TransplantNet::new();
    net.add_task(teacher.task.clone()).unwrap();
    net.graft(&teacher, teacher.task.id(), &AdapterArch::default(), AdapterInit::He, &mut rng)
        .unwrap();
    let images = (0..64)
        .map(|i| generate::<f32>(&world, 0, Split::Train, i).unwrap().image)
        .collect();
    Fixture {
        teacher,
        net,
        images,
    }
}

fn bench_batch_forward(c: &mut Criterion) {
    let fx = fixture();
    let path = fx.teacher.path();
    let mut group = c.benchmark_group("batch_forward_64");
    group.bench_function("seq", |b| {
        b.iter(|| {
            let ys = seq_map(&fx.images, |img| path.forward(img).unwrap().0);
            black_box(ys)
        })
    });
    group.bench_function("par", |b| {
        b.iter(|| {
            let ys = par_map(&fx.images, |img| path.forward(img).unwrap().0);
            black_box(ys)
        })
    });
    group.finish();
}

fn bench_seed_batch(c: &mut Criterion) {
    let fx = fixture();
    let path = fx.net.compose_path("disk", fx.teacher.task.id()).unwrap();
    let rules = PseudoRules::default();
    let mut rng = Rng::new(5);
    let mut next_id = 0;
    let seeds = random_seeds::<f32>(&Shape::new(vec![2]), 64, &mut rng, &mut next_id);
    let mut group = c.benchmark_group("pseudo_gradients_64_seeds");
    group.bench_function("seq", |b| {
        b.iter(|| {
            let ds = seq_map(&seeds, |s| pseudo_gradient(&path, s, &rules).unwrap());
            black_box(ds)
        })
    });
    group.bench_function("par", |b| {
        b.iter(|| {
            let ds = par_map(&seeds, |s| pseudo_gradient(&path, s, &rules).unwrap());
            black_box(ds)
        })
    });
    group.finish();
}

fn bench_distill_step(c: &mut Criterion) {
    let fx = fixture();
    let rules = PseudoRules::default();
    let path = fx.net.compose_path("disk", fx.teacher.task.id()).unwrap();
    let graph = build_graph(&path, &rules).unwrap();
    let teacher_map = LinearPseudoMap::of_path(&fx.teacher.path(), &rules).unwrap();
    let mut rng = Rng::new(6);
    let mut next_id = 0;
    let seeds = random_seeds::<f32>(&Shape::new(vec![2]), 8, &mut rng, &mut next_id);
    let cached = teacher_map.grads_for(&seeds).unwrap();
    let mut group = c.benchmark_group("distill_step_k8");
    group.bench_function("one_worker", |b| {
        b.iter(|| {
            let out = with_workers(Some(1), || {
                distill_loss_and_grad(&graph, &path, &cached, &seeds, AlphaMode::Ls, None, 1.0)
                    .unwrap()
            });
            black_box(out.loss)
        })
    });
    group.bench_function("pool", |b| {
        b.iter(|| {
            let out =
                distill_loss_and_grad(&graph, &path, &cached, &seeds, AlphaMode::Ls, None, 1.0)
                    .unwrap();
            black_box(out.loss)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_forward, bench_seed_batch, bench_distill_step);
criterion_main!(benches);
