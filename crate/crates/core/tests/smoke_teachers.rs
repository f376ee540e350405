//! Scratch margin probe; removed before release.
use transplant_core::experiments::{
    evaluate_from_junction, pretrain_teacher, sample_set, ExperimentPlan, PretrainBudget, TaskKind,
};
use transplant_core::graph::{AdapterArch, AdapterInit, TransplantNet};
use transplant_core::shapeworld::{ShapeWorldSpec, Split};
use transplant_core::tensor::Rng;
use transplant_core::train::{junction_features, train_adapter, Strategy};

#[test]
#[ignore]
fn margins() {
    let world = ShapeWorldSpec::default();
    let knobs = ExperimentPlan::exp1().knobs;
    for cat in ["disk", "bar", "triangle"] {
        let (teacher, rep) =
            pretrain_teacher::<f32>(cat, TaskKind::Cls, &world, &PretrainBudget::default(), 42).unwrap();
        let test = sample_set::<f32>(&world, cat, Split::Test, world.splits.test, TaskKind::Cls).unwrap();
        let feats = junction_features(&teacher.category, test.images()).unwrap();
        for (strategy, n, depth) in [
            (Strategy::BackDistill, 0usize, 1usize),
            (Strategy::DirectLearn, 20, 1),
            (Strategy::BackDistill, 0, 3),
        ] {
            let mut errs = Vec::new();
            for seed in [1u64, 2, 3] {
                let mut net = TransplantNet::new();
                net.add_task(teacher.task.clone()).unwrap();
                let mut rng = Rng::for_stream(seed, "init");
                net.graft(&teacher, teacher.task.id(), &AdapterArch::with_depth(depth), AdapterInit::He, &mut rng).unwrap();
                let data = (n > 0).then(|| sample_set::<f32>(&world, cat, Split::Train, n, TaskKind::Cls).unwrap());
                let cfg = knobs.config(strategy, n, seed);
                train_adapter(&mut net, &teacher, (cat, teacher.task.id()), data.as_ref(), &cfg).unwrap();
                let path = net.compose_path(cat, teacher.task.id()).unwrap();
                errs.push(evaluate_from_junction(&path, &feats, &test, TaskKind::Cls).unwrap());
            }
            println!(
                "{cat} (teacher {:.2}) {strategy} N={n} d{depth}: {:?} mean {:.2}",
                rep.val_metric,
                errs,
                errs.iter().sum::<f64>() / 3.0
            );
        }
    }
}
