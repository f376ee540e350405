//! Desk-scale experiment harness: architecture presets, teacher pretraining
//! with quality gates, metric evaluation and the sweep plans comparing the
//! training strategies across sample budgets and categories.
//!
//! Plan cells are independent jobs keyed by (category, strategy, samples,
//! depth); they run in parallel up to a configured worker count and reduce
//! into a deterministic grid. One experiment seed fixes the dataset, module
//! initialization, probe seeds and optimizer trajectory, so a repeated plan
//! reproduces its grid bitwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backback::AlphaMode;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{AdapterArch, AdapterInit, ComposedPath, GradScope, NetModule, Role, TeacherNet, TransplantNet};
use crate::layers::{LayerParams, LayerSpec, PseudoRules};
use crate::parallel::{par_map, with_workers};
use crate::shapeworld::{generate, Sample, ShapeWorldSpec, Split};
use crate::tensor::{Element, Rng, Shape, Tensor};
use crate::train::{
    forward_all, forward_all_upper, junction_features, merge_grads, optimizer_step, task_loss,
    train_adapter, LabelRef, Labels, OptimState, Optimizer, SampleSet, Strategy, TrainConfig,
    TrainLog,
};

/// Which task a module solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Cls,
    Seg,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Cls => write!(f, "cls"),
            TaskKind::Seg => write!(f, "seg"),
        }
    }
}

/// Architecture presets: small enough for minutes-scale CPU runs, deep enough
/// to contain the ReLU/max-pool nonlinearity the pseudo-gradient rules
/// rewrite.
pub mod presets {
    use super::*;

    pub const JUNCTION_CHANNELS: usize = 12;

    /// Category module: four 3x3 conv+ReLU blocks with two max-pools.
    /// `1 x S x S` -> `JUNCTION_CHANNELS x S/4 x S/4`.
    pub fn category_layers() -> Vec<LayerSpec> {
        let c = JUNCTION_CHANNELS;
        vec![
            LayerSpec::Conv {
                out_channels: 12,
                in_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv {
                out_channels: 16,
                in_channels: 12,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: 16,
                in_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv {
                out_channels: c,
                in_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
        ]
    }

    /// Classification task module: one conv block, then flatten and a dense
    /// layer onto two logits (absent / present).
    pub fn cls_task_layers(junction: &Shape) -> Result<Vec<LayerSpec>> {
        let (c, h, w) = junction.as_chw()?;
        Ok(vec![
            LayerSpec::Conv {
                out_channels: 8,
                in_channels: c,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8 * h * w,
                outputs: 2,
            },
        ])
    }

    /// Segmentation task module: two conv layers, nearest upsampling back to
    /// image resolution, then a sigmoid head producing per-pixel mask
    /// probabilities.
    pub fn seg_task_layers(junction: &Shape, upsample: usize) -> Result<Vec<LayerSpec>> {
        let (c, _, _) = junction.as_chw()?;
        Ok(vec![
            LayerSpec::Conv {
                out_channels: 8,
                in_channels: c,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: 1,
                in_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::UpsampleNearest { factor: upsample },
            LayerSpec::SigmoidHead,
        ])
    }

    /// Fresh unfrozen teacher with He-initialized parameters.
    pub fn fresh_teacher<E: Element>(
        category_id: &str,
        task: TaskKind,
        image_shape: &Shape,
        rng: &mut Rng,
    ) -> Result<TeacherNet<E>> {
        let category = NetModule::with_random_params(
            category_id,
            Role::Category,
            category_layers(),
            image_shape.clone(),
            rng,
        )?;
        let junction = category.output_shape().clone();
        let (task_id, layers) = match task {
            TaskKind::Cls => (format!("cls-{category_id}"), cls_task_layers(&junction)?),
            TaskKind::Seg => {
                let (_, jh, _) = junction.as_chw()?;
                let (_, ih, _) = image_shape.as_chw()?;
                (
                    format!("seg-{category_id}"),
                    seg_task_layers(&junction, ih / jh)?,
                )
            }
        };
        let task_mod = NetModule::with_random_params(task_id, Role::Task, layers, junction, rng)?;
        TeacherNet::new(category, task_mod)
    }
}

/// Quality gates a pretrained teacher must clear on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityGates {
    /// Classification: maximum validation error, percent.
    pub cls_max_error: f64,
    /// Segmentation: minimum validation pixel accuracy, percent.
    pub seg_min_pixel_acc: f64,
}

impl Default for QualityGates {
    fn default() -> Self {
        QualityGates {
            cls_max_error: 5.0,
            seg_min_pixel_acc: 90.0,
        }
    }
}

/// Budget for teacher pretraining. Teachers train for the full step budget;
/// the gate is a minimum quality bar verified on the validation split at the
/// end, not an early-stopping target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub gates: QualityGates,
}

impl Default for PretrainBudget {
    fn default() -> Self {
        PretrainBudget {
            steps: 1200,
            batch_size: 16,
            optimizer: Optimizer::default(),
            gates: QualityGates::default(),
        }
    }
}

/// Outcome of a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub category: String,
    pub task: TaskKind,
    pub steps_used: usize,
    /// Validation metric at the stop point: error % for cls, pixel accuracy %
    /// for seg.
    pub val_metric: f64,
}

fn dataset_samples<E: Element>(
    world: &ShapeWorldSpec,
    category: usize,
    split: Split,
    count: usize,
    task: TaskKind,
) -> Result<SampleSet<E>> {
    // Single-category segmentation uses object-bearing images only;
    // positives sit at even indices.
    let indexed: Vec<usize> = match task {
        TaskKind::Cls => (0..count).collect(),
        TaskKind::Seg => (0..count).map(|i| 2 * i).collect(),
    };
    let samples = par_map(&indexed, |&i| generate::<E>(world, category, split, i));
    let samples: Vec<Sample<E>> = samples.into_iter().collect::<Result<_>>()?;
    let images = samples.iter().map(|s| s.image.clone()).collect();
    let labels = match task {
        TaskKind::Cls => Labels::Classes(samples.iter().map(|s| s.label).collect()),
        TaskKind::Seg => Labels::Masks(samples.iter().map(|s| s.mask.clone()).collect()),
    };
    SampleSet::new(images, labels)
}

/// Loads `count` samples of one split as a sample set. Segmentation sets
/// contain only object-bearing samples, so they draw on half the split.
pub fn sample_set<E: Element>(
    world: &ShapeWorldSpec,
    category: &str,
    split: Split,
    count: usize,
    task: TaskKind,
) -> Result<SampleSet<E>> {
    let idx = world.category_index(category)?;
    let max = match task {
        TaskKind::Cls => world.splits.of(split),
        TaskKind::Seg => world.splits.of(split) / 2,
    };
    if count > max {
        return Err(Error::Config(format!(
            "requested {count} samples, split offers {max} for {task}"
        )));
    }
    dataset_samples(world, idx, split, count, task)
}

/// Classification error in percent: fraction of samples whose argmax logit
/// disagrees with the label.
pub fn cls_error_percent<E: Element>(outputs: &[Tensor<E>], labels: &[usize]) -> f64 {
    let wrong = outputs
        .iter()
        .zip(labels)
        .filter(|(y, &l)| {
            let pred = usize::from(y.data()[1] > y.data()[0]);
            pred != l
        })
        .count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Pixel accuracy in percent: fraction of pixels whose thresholded (0.5)
/// prediction matches the mask.
pub fn seg_pixel_accuracy_percent<E: Element>(outputs: &[Tensor<E>], masks: &[Tensor<E>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (y, m) in outputs.iter().zip(masks) {
        for (p, q) in y.data().iter().zip(m.data()) {
            let pred = p.to_f64() >= 0.5;
            let truth = q.to_f64() >= 0.5;
            if pred == truth {
                hits += 1;
            }
            total += 1;
        }
    }
    100.0 * hits as f64 / total as f64
}

/// Intersection-over-union of thresholded predictions against masks.
pub fn seg_iou<E: Element>(outputs: &[Tensor<E>], masks: &[Tensor<E>]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (y, m) in outputs.iter().zip(masks) {
        for (p, q) in y.data().iter().zip(m.data()) {
            let pred = p.to_f64() >= 0.5;
            let truth = q.to_f64() >= 0.5;
            if pred && truth {
                inter += 1;
            }
            if pred || truth {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn set_labels_cls<E: Element>(set: &SampleSet<E>) -> Vec<usize> {
    (0..set.len())
        .map(|i| match set.label(i) {
            LabelRef::Class(c) => c,
            LabelRef::Mask(_) => unreachable!("classification sample set"),
        })
        .collect()
}

fn set_masks<E: Element>(set: &SampleSet<E>) -> Vec<Tensor<E>> {
    (0..set.len())
        .map(|i| match set.label(i) {
            LabelRef::Mask(m) => m.clone(),
            LabelRef::Class(_) => unreachable!("segmentation sample set"),
        })
        .collect()
}

fn metric_for<E: Element>(outputs: &[Tensor<E>], set: &SampleSet<E>, task: TaskKind) -> f64 {
    match task {
        TaskKind::Cls => cls_error_percent(outputs, &set_labels_cls(set)),
        TaskKind::Seg => seg_pixel_accuracy_percent(outputs, &set_masks(set)),
    }
}

/// Evaluates a composed path on a sample set: classification error % or
/// segmentation pixel accuracy %.
pub fn evaluate<E: Element>(
    path: &ComposedPath<'_, E>,
    set: &SampleSet<E>,
    task: TaskKind,
) -> Result<f64> {
    let outputs = forward_all(path, set.images())?;
    Ok(metric_for(&outputs, set, task))
}

/// Evaluation from cached junction features through the upper path only;
/// exact because the category module is frozen.
pub fn evaluate_from_junction<E: Element>(
    path: &ComposedPath<'_, E>,
    features: &[Tensor<E>],
    set: &SampleSet<E>,
    task: TaskKind,
) -> Result<f64> {
    let outputs = forward_all_upper(path, features)?;
    Ok(metric_for(&outputs, set, task))
}

/// Pretrains a teacher (category + task module jointly, from scratch) on one
/// category's dataset until the validation gate passes. Returns the frozen
/// teacher and a report; fails with a quality-gate error if the budget runs
/// out first.
pub fn pretrain_teacher<E: Element>(
    category: &str,
    task: TaskKind,
    world: &ShapeWorldSpec,
    budget: &PretrainBudget,
    seed: u64,
) -> Result<(TeacherNet<E>, PretrainReport)> {
    let cat_idx = world.category_index(category)?;
    let mut rng = Rng::for_stream(seed, &format!("pretrain-{category}-{task}"));
    let mut teacher = presets::fresh_teacher::<E>(category, task, &world.image_shape(), &mut rng)?;

    let per_task = |n: usize| match task {
        TaskKind::Cls => n,
        TaskKind::Seg => n / 2,
    };
    let train_set =
        dataset_samples::<E>(world, cat_idx, Split::Train, per_task(world.splits.train), task)?;
    let val_set = dataset_samples::<E>(world, cat_idx, Split::Val, per_task(world.splits.val), task)?;

    // Optimizer over every parameter tensor of both modules, in path order.
    let mut shapes = Vec::new();
    for m in [&teacher.category, &teacher.task] {
        for p in m.params() {
            if let Some(w) = &p.weights {
                shapes.push(w.shape().clone());
            }
            if let Some(b) = &p.bias {
                shapes.push(b.shape().clone());
            }
        }
    }
    let mut optim = OptimState::<E>::for_shapes(&shapes);
    let n_cat_layers = teacher.category.layers().len();

    let gate_passes = |metric: f64| match task {
        TaskKind::Cls => metric <= budget.gates.cls_max_error,
        TaskKind::Seg => metric >= budget.gates.seg_min_pixel_acc,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut pos = order.len();

    for _ in 0..budget.steps {
        let batch = budget.batch_size.min(train_set.len());
        if pos + batch > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let indices: Vec<usize> = order[pos..pos + batch].to_vec();
        pos += batch;

        let grads = {
            let path = teacher.path();
            let per_sample = par_map(&indices, |&i| -> Result<_> {
                let (y, trace) = path.forward(&train_set.images()[i])?;
                let (_, gy) = task_loss(&y, train_set.label(i))?;
                Ok(path.backward(&trace, &gy, GradScope::All, 0)?.param_grads)
            });
            let mut agg: Vec<Option<LayerParams<E>>> =
                (0..path.layers.len()).map(|_| None).collect();
            let inv = E::from_f64(1.0 / batch as f64);
            for g in per_sample {
                merge_grads(&mut agg, g?, inv)?;
            }
            agg
        };

        // Apply to both modules; path order = category layers then task
        // layers, weights before bias.
        {
            let mut params: Vec<&mut Tensor<E>> = Vec::new();
            let mut grad_list: Vec<Tensor<E>> = Vec::new();
            let (cat_mod, task_mod) = (&mut teacher.category, &mut teacher.task);
            for (offset, module) in [(0usize, cat_mod), (n_cat_layers, task_mod)] {
                for (li, p) in module.params_mut().iter_mut().enumerate() {
                    let g = grads[offset + li].as_ref();
                    if let Some(w) = p.weights.as_mut() {
                        grad_list.push(
                            g.and_then(|g| g.weights.clone())
                                .unwrap_or_else(|| Tensor::zeros(w.shape())),
                        );
                        params.push(w);
                    }
                    if let Some(b) = p.bias.as_mut() {
                        grad_list.push(
                            g.and_then(|g| g.bias.clone())
                                .unwrap_or_else(|| Tensor::zeros(b.shape())),
                        );
                        params.push(b);
                    }
                }
            }
            let grad_refs: Vec<&Tensor<E>> = grad_list.iter().collect();
            optimizer_step(&budget.optimizer, &mut optim, params, &grad_refs)?;
        }
    }

    let val_metric = evaluate(&teacher.path(), &val_set, task)?;
    if !gate_passes(val_metric) {
        return Err(Error::QualityGate {
            metric: format!("{category}/{task} validation"),
            value: val_metric,
            requirement: match task {
                TaskKind::Cls => format!("error <= {}%", budget.gates.cls_max_error),
                TaskKind::Seg => format!("pixel accuracy >= {}%", budget.gates.seg_min_pixel_acc),
            },
        });
    }

    teacher.freeze();
    Ok((
        teacher,
        PretrainReport {
            category: category.to_string(),
            task,
            steps_used: budget.steps,
            val_metric,
        },
    ))
}

/// Experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Insert an adapter between a teacher's own category and task modules.
    Exp1AdapterInsertion,
    /// Sequentially transplant categories onto one shared classification
    /// module; earlier categories must stay bitwise unaffected.
    Exp2ClsSequence,
    /// Transplant category modules onto one generic segmentation module.
    Exp3SegTransplant,
}

impl ExperimentId {
    pub fn task_kind(self) -> TaskKind {
        match self {
            ExperimentId::Exp1AdapterInsertion | ExperimentId::Exp2ClsSequence => TaskKind::Cls,
            ExperimentId::Exp3SegTransplant => TaskKind::Seg,
        }
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExperimentId::Exp1AdapterInsertion => write!(f, "exp1-adapter-insertion"),
            ExperimentId::Exp2ClsSequence => write!(f, "exp2-cls-sequence"),
            ExperimentId::Exp3SegTransplant => write!(f, "exp3-seg-transplant"),
        }
    }
}

/// Per-run training knobs shared by all cells of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunKnobs {
    pub steps: usize,
    pub seeds_per_step: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub alpha_mode: AlphaMode,
    /// `None` resolves per sample count (1 without labels, 10 with).
    pub lambda: Option<f64>,
    pub pseudo_rules: PseudoRules,
}

impl Default for RunKnobs {
    fn default() -> Self {
        RunKnobs {
            steps: 1500,
            seeds_per_step: 8,
            batch_size: 16,
            optimizer: Optimizer::Adam {
                lr: 5e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            alpha_mode: AlphaMode::Ls,
            lambda: None,
            pseudo_rules: PseudoRules::default(),
        }
    }
}

impl RunKnobs {
    pub fn config(&self, strategy: Strategy, samples: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            samples,
            seed,
            lambda: self
                .lambda
                .unwrap_or_else(|| crate::train::default_lambda(samples)),
            alpha_mode: self.alpha_mode,
            seeds_per_step: self.seeds_per_step,
            optimizer: self.optimizer,
            steps: self.steps,
            batch_size: self.batch_size,
            pseudo_rules: self.pseudo_rules,
        }
    }
}

/// A full sweep: every (strategy, samples, category, depth) cell maps to
/// exactly one training run per repetition seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub experiment: ExperimentId,
    pub adapter_depths: Vec<usize>,
    pub sample_counts: Vec<usize>,
    pub categories: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub repetition_seeds: Vec<u64>,
    /// Category whose pretrained task module seeds the shared `g_S`
    /// (required for exp2/exp3; ignored for exp1, where each category reuses
    /// its own teacher's task module).
    pub task_source: Option<String>,
    #[serde(default)]
    pub knobs: RunKnobs,
}

impl ExperimentPlan {
    pub fn exp1() -> Self {
        ExperimentPlan {
            experiment: ExperimentId::Exp1AdapterInsertion,
            adapter_depths: vec![1],
            sample_counts: vec![0, 10, 20, 50, 100],
            categories: default_category_names(),
            strategies: vec![Strategy::DirectLearn, Strategy::BackDistill],
            repetition_seeds: vec![1, 2, 3],
            task_source: None,
            knobs: RunKnobs::default(),
        }
    }

    pub fn exp2() -> Self {
        ExperimentPlan {
            experiment: ExperimentId::Exp2ClsSequence,
            adapter_depths: vec![1],
            sample_counts: vec![0],
            categories: vec!["cross".into(), "triangle".into(), "ring".into()],
            strategies: vec![Strategy::BackDistill],
            repetition_seeds: vec![1, 2, 3],
            task_source: Some("disk".into()),
            knobs: RunKnobs::default(),
        }
    }

    pub fn exp3() -> Self {
        ExperimentPlan {
            experiment: ExperimentId::Exp3SegTransplant,
            adapter_depths: vec![1],
            sample_counts: vec![10, 20, 50, 100],
            categories: vec![
                "cross".into(),
                "triangle".into(),
                "ring".into(),
                "bar".into(),
            ],
            strategies: vec![Strategy::DirectLearn, Strategy::Distill, Strategy::BackDistill],
            repetition_seeds: vec![1, 2, 3],
            task_source: Some("disk".into()),
            knobs: RunKnobs {
                // Sum-norm distillation residuals over 1024-dim mask seeds
                // are ~3 orders above the task loss; this keeps both terms
                // the same order of magnitude at init.
                lambda: Some(1e-3),
                ..RunKnobs::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty()
            || self.strategies.is_empty()
            || self.sample_counts.is_empty()
            || self.adapter_depths.is_empty()
            || self.repetition_seeds.is_empty()
        {
            return Err(Error::Config("plan has an empty sweep axis".into()));
        }
        match self.experiment {
            ExperimentId::Exp1AdapterInsertion => Ok(()),
            _ => match &self.task_source {
                None => Err(Error::Config(format!(
                    "{} needs a task_source category",
                    self.experiment
                ))),
                Some(src) if self.categories.contains(src) => Err(Error::Config(format!(
                    "task_source `{src}` cannot also be transplanted"
                ))),
                Some(_) => Ok(()),
            },
        }
    }
}

pub fn default_category_names() -> Vec<String> {
    ShapeWorldSpec::default()
        .categories
        .iter()
        .map(|c| c.name.clone())
        .collect()
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub category: String,
    pub strategy: Strategy,
    pub samples: usize,
    pub depth: usize,
}

/// Result of one cell across its repetition seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CellOutcome {
    Metric { per_seed: Vec<f64>, mean: f64 },
    /// Cell is undefined (direct-learn at zero samples).
    Skipped { reason: String },
    Failed { error: String },
}

impl CellOutcome {
    pub fn mean(&self) -> Option<f64> {
        match self {
            CellOutcome::Metric { mean, .. } => Some(*mean),
            _ => None,
        }
    }
}

/// Deterministic result grid of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultGrid {
    pub experiment: ExperimentId,
    /// "error %" (classification) or "pixel accuracy %" (segmentation).
    pub metric_name: String,
    pub categories: Vec<String>,
    pub cells: Vec<(CellKey, CellOutcome)>,
}

impl ResultGrid {
    pub fn get(&self, key: &CellKey) -> Option<&CellOutcome> {
        self.cells.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn mean_of(
        &self,
        category: &str,
        strategy: Strategy,
        samples: usize,
        depth: usize,
    ) -> Option<f64> {
        self.get(&CellKey {
            category: category.to_string(),
            strategy,
            samples,
            depth,
        })
        .and_then(CellOutcome::mean)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("grid encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("grid parse: {e}")))
    }
}

/// Teacher provider with optional on-disk caching.
pub struct PlanContext<E: Element> {
    pub world: ShapeWorldSpec,
    pub budget: PretrainBudget,
    pub teacher_seed: u64,
    pub cache_dir: Option<PathBuf>,
    teachers: BTreeMap<(String, TaskKind), TeacherNet<E>>,
    pub reports: Vec<PretrainReport>,
}

impl<E: Element> PlanContext<E> {
    pub fn new(world: ShapeWorldSpec, budget: PretrainBudget, teacher_seed: u64) -> Self {
        PlanContext {
            world,
            budget,
            teacher_seed,
            cache_dir: None,
            teachers: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    /// Pretrains (or loads from cache) the teacher for one category/task.
    pub fn ensure_teacher(&mut self, category: &str, task: TaskKind) -> Result<()> {
        let key = (category.to_string(), task);
        if self.teachers.contains_key(&key) {
            return Ok(());
        }
        let ckpt = self
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("teacher-{category}-{task}")));
        if let Some(dir) = &ckpt {
            if dir.join("manifest.json").exists() {
                let teacher = checkpoint::load_teacher::<E>(dir)?;
                self.teachers.insert(key, teacher);
                return Ok(());
            }
        }
        let (teacher, report) =
            pretrain_teacher::<E>(category, task, &self.world, &self.budget, self.teacher_seed)?;
        if let Some(dir) = &ckpt {
            checkpoint::save_teacher(dir, &teacher)?;
        }
        self.reports.push(report);
        self.teachers.insert(key, teacher);
        Ok(())
    }

    pub fn teacher(&self, category: &str, task: TaskKind) -> Result<&TeacherNet<E>> {
        self.teachers
            .get(&(category.to_string(), task))
            .ok_or_else(|| Error::MissingModule(format!("teacher {category}/{task}")))
    }

    /// Installs an already-pretrained teacher; it must be frozen.
    pub fn insert_teacher(&mut self, category: &str, task: TaskKind, teacher: TeacherNet<E>) -> Result<()> {
        if !teacher.category.frozen() || !teacher.task.frozen() {
            return Err(Error::Config("inserted teachers must be frozen".into()));
        }
        self.teachers.insert((category.to_string(), task), teacher);
        Ok(())
    }
}

/// Per-category evaluation cache: the test set plus its junction features
/// under the (frozen) category module.
struct EvalCache<E: Element> {
    test_set: SampleSet<E>,
    features: Vec<Tensor<E>>,
}

fn build_eval_cache<E: Element>(
    ctx: &PlanContext<E>,
    category: &str,
    task: TaskKind,
) -> Result<EvalCache<E>> {
    let count = match task {
        TaskKind::Cls => ctx.world.splits.test,
        TaskKind::Seg => ctx.world.splits.test / 2,
    };
    let test_set = sample_set::<E>(&ctx.world, category, Split::Test, count, task)?;
    let teacher = ctx.teacher(category, task)?;
    let features = junction_features(&teacher.category, test_set.images())?;
    Ok(EvalCache { test_set, features })
}

/// Inputs shared by every cell run of one plan.
struct CellEnv<'c, E: Element> {
    plan: &'c ExperimentPlan,
    ctx: &'c PlanContext<E>,
    caches: &'c BTreeMap<String, EvalCache<E>>,
    task: TaskKind,
    out_dir: Option<&'c Path>,
}

fn cell_seed(plan_seed: u64, key: &CellKey) -> u64 {
    // Stable per-cell stream: the cell key hashes into the repetition seed.
    let label = format!(
        "{}|{}|{}|{}",
        key.category, key.strategy, key.samples, key.depth
    );
    Rng::for_stream(plan_seed, &label).seed()
}

/// Builds the student net for one run and trains its adapter.
fn run_single<E: Element>(
    env: &CellEnv<'_, E>,
    key: &CellKey,
    rep_seed: u64,
) -> Result<(f64, TrainLog)> {
    let task = env.task;
    let teacher = env.ctx.teacher(&key.category, task)?;
    let task_module = match env.plan.experiment {
        ExperimentId::Exp1AdapterInsertion => teacher.task.clone(),
        _ => {
            let src = env.plan.task_source.as_deref().expect("validated");
            env.ctx.teacher(src, task)?.task.clone()
        }
    };
    let task_id = task_module.id().to_string();
    let mut net = TransplantNet::new();
    net.add_task(task_module)?;
    let seed = cell_seed(rep_seed, key);
    let mut init_rng = Rng::for_stream(seed, "adapter-init");
    net.graft(
        teacher,
        &task_id,
        &AdapterArch::with_depth(key.depth),
        AdapterInit::He,
        &mut init_rng,
    )?;

    let data = if key.samples > 0 {
        Some(sample_set::<E>(
            &env.ctx.world,
            &key.category,
            Split::Train,
            key.samples,
            task,
        )?)
    } else {
        None
    };
    let cfg = env.plan.knobs.config(key.strategy, key.samples, seed);
    let log = train_adapter(&mut net, teacher, (&key.category, &task_id), data.as_ref(), &cfg)?;

    let cache = &env.caches[&key.category];
    let path = net.compose_path(&key.category, &task_id)?;
    let metric = evaluate_from_junction(&path, &cache.features, &cache.test_set, task)?;

    if let Some(dir) = env.out_dir {
        let cells = dir.join("cells");
        std::fs::create_dir_all(&cells)?;
        log.write_csv(cells.join(format!(
            "{}-{}-n{}-d{}-s{}.csv",
            key.category, key.strategy, key.samples, key.depth, rep_seed
        )))?;
    }
    Ok((metric, log))
}

fn run_cell<E: Element>(env: &CellEnv<'_, E>, key: &CellKey) -> CellOutcome {
    if key.strategy != Strategy::BackDistill && key.samples == 0 {
        return CellOutcome::Skipped {
            reason: "—".into(),
        };
    }
    let mut per_seed = Vec::with_capacity(env.plan.repetition_seeds.len());
    for &rep in &env.plan.repetition_seeds {
        match run_single(env, key, rep) {
            Ok((metric, _)) => per_seed.push(metric),
            Err(e) => {
                return CellOutcome::Failed {
                    error: e.to_string(),
                }
            }
        }
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    CellOutcome::Metric { per_seed, mean }
}

/// Runs every cell of the plan, in parallel up to `workers`, and reduces the
/// outcomes into a grid. Teachers must already be present in the context
/// (see [`prepare_context`]).
pub fn run_plan<E: Element>(
    plan: &ExperimentPlan,
    ctx: &PlanContext<E>,
    workers: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<ResultGrid> {
    plan.validate()?;
    let task = plan.experiment.task_kind();
    let mut caches = BTreeMap::new();
    for cat in &plan.categories {
        caches.insert(cat.clone(), build_eval_cache(ctx, cat, task)?);
    }
    let env = CellEnv {
        plan,
        ctx,
        caches: &caches,
        task,
        out_dir,
    };

    let keys: Vec<CellKey> = plan
        .categories
        .iter()
        .flat_map(|cat| {
            plan.strategies.iter().flat_map(move |&strategy| {
                plan.sample_counts.iter().flat_map(move |&samples| {
                    plan.adapter_depths.iter().map(move |&depth| CellKey {
                        category: cat.clone(),
                        strategy,
                        samples,
                        depth,
                    })
                })
            })
        })
        .collect();

    let cells: Vec<(CellKey, CellOutcome)> = match plan.experiment {
        ExperimentId::Exp2ClsSequence => run_sequences(&env, &keys)?,
        _ => with_workers(workers, || {
            par_map(&keys, |key| (key.clone(), run_cell(&env, key)))
        }),
    };

    Ok(ResultGrid {
        experiment: plan.experiment,
        metric_name: match task {
            TaskKind::Cls => "error %".into(),
            TaskKind::Seg => "pixel accuracy %".into(),
        },
        categories: plan.categories.clone(),
        cells,
    })
}

/// Pretrains every teacher the plan needs.
pub fn prepare_context<E: Element>(plan: &ExperimentPlan, ctx: &mut PlanContext<E>) -> Result<()> {
    plan.validate()?;
    let task = plan.experiment.task_kind();
    if let Some(src) = &plan.task_source {
        ctx.ensure_teacher(src, task)?;
    }
    for cat in &plan.categories {
        ctx.ensure_teacher(cat, task)?;
    }
    Ok(())
}

/// Exp2: sequential transplants onto one shared net. After each graft+train,
/// all previously transplanted categories are re-evaluated; any drift from
/// their first measurement fails the run. Returns per-category cells plus the
/// sequence audit embedded in the outcome.
fn run_sequences<E: Element>(
    env: &CellEnv<'_, E>,
    keys: &[CellKey],
) -> Result<Vec<(CellKey, CellOutcome)>> {
    let plan = env.plan;
    let task = env.task;
    let src = plan.task_source.as_deref().expect("validated");
    let mut results: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();

    for &depth in &plan.adapter_depths {
        for &strategy in &plan.strategies {
            for &samples in &plan.sample_counts {
                if strategy != Strategy::BackDistill && samples == 0 {
                    continue;
                }
                for &rep in &plan.repetition_seeds {
                    let task_module = env.ctx.teacher(src, task)?.task.clone();
                    let task_id = task_module.id().to_string();
                    let mut net = TransplantNet::new();
                    net.add_task(task_module)?;
                    let mut measured: Vec<(String, f64)> = Vec::new();
                    for cat in &plan.categories {
                        let key = CellKey {
                            category: cat.clone(),
                            strategy,
                            samples,
                            depth,
                        };
                        let seed = cell_seed(rep, &key);
                        let teacher = env.ctx.teacher(cat, task)?;
                        let mut init_rng = Rng::for_stream(seed, "adapter-init");
                        net.graft(
                            teacher,
                            &task_id,
                            &AdapterArch::with_depth(depth),
                            AdapterInit::He,
                            &mut init_rng,
                        )?;
                        let data = if samples > 0 {
                            Some(sample_set::<E>(
                                &env.ctx.world,
                                cat,
                                Split::Train,
                                samples,
                                task,
                            )?)
                        } else {
                            None
                        };
                        let cfg = plan.knobs.config(strategy, samples, seed);
                        train_adapter(&mut net, teacher, (cat, &task_id), data.as_ref(), &cfg)?;

                        // Evaluate the new category, then re-check all
                        // previous ones for bitwise-identical metrics.
                        let cache = &env.caches[cat];
                        let path = net.compose_path(cat, &task_id)?;
                        let metric =
                            evaluate_from_junction(&path, &cache.features, &cache.test_set, task)?;
                        for (prev_cat, prev_metric) in &measured {
                            let cache = &env.caches[prev_cat];
                            let path = net.compose_path(prev_cat, &task_id)?;
                            let again = evaluate_from_junction(
                                &path,
                                &cache.features,
                                &cache.test_set,
                                task,
                            )?;
                            if again.to_bits() != prev_metric.to_bits() {
                                return Err(Error::FrozenViolated(format!(
                                    "sequence drift: {prev_cat} measured {prev_metric}, now {again}"
                                )));
                            }
                        }
                        measured.push((cat.clone(), metric));
                        results.entry(key).or_default().push(metric);
                    }
                }
            }
        }
    }

    Ok(keys
        .iter()
        .map(|key| {
            let outcome = match results.get(key) {
                Some(per_seed) => CellOutcome::Metric {
                    mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                    per_seed: per_seed.clone(),
                },
                None => CellOutcome::Skipped { reason: "—".into() },
            };
            (key.clone(), outcome)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let sh = Shape::new(vec![2]);
        let pos = Tensor::<f64>::from_vec(&sh, vec![0.0, 1.0]).unwrap();
        let neg = Tensor::<f64>::from_vec(&sh, vec![1.0, 0.0]).unwrap();
        let labels = vec![1, 0, 1, 0];
        let perfect: Vec<Tensor<f64>> = labels
            .iter()
            .map(|&l| if l == 1 { pos.clone() } else { neg.clone() })
            .collect();
        assert_eq!(cls_error_percent(&perfect, &labels), 0.0);
        let constant: Vec<Tensor<f64>> = labels.iter().map(|_| neg.clone()).collect();
        assert_eq!(cls_error_percent(&constant, &labels), 50.0);
    }

    #[test]
    fn metric_matches_recount_oracle() {
        let mut rng = Rng::new(9);
        let sh = Shape::new(vec![2]);
        let outputs: Vec<Tensor<f64>> = (0..100).map(|_| Tensor::randn(&sh, &mut rng)).collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.below(2)).collect();
        let fast = cls_error_percent(&outputs, &labels);
        let mut wrong = 0;
        for (y, &l) in outputs.iter().zip(&labels) {
            let pred = if y.data()[1] > y.data()[0] { 1 } else { 0 };
            if pred != l {
                wrong += 1;
            }
        }
        assert_eq!(fast, 100.0 * wrong as f64 / 100.0);
    }

    #[test]
    fn seg_accuracy_definition() {
        let sh = Shape::new(vec![1, 2, 2]);
        let probs = Tensor::<f64>::from_vec(&sh, vec![0.9, 0.1, 0.6, 0.2]).unwrap();
        let mask = Tensor::<f64>::from_vec(&sh, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // predictions: 1,0,1,0 vs mask 1,0,0,0 -> 3 of 4 match
        assert_eq!(seg_pixel_accuracy_percent(&[probs], &[mask]), 75.0);
    }

    #[test]
    fn plan_validation() {
        let exp1 = ExperimentPlan::exp1();
        assert!(exp1.validate().is_ok());
        let mut exp3 = ExperimentPlan::exp3();
        assert!(exp3.validate().is_ok());
        exp3.task_source = None;
        assert!(exp3.validate().is_err());
        let mut exp3 = ExperimentPlan::exp3();
        exp3.task_source = Some("cross".into());
        assert!(exp3.validate().is_err());
    }

    #[test]
    fn grid_round_trips_through_json() {
        let grid = ResultGrid {
            experiment: ExperimentId::Exp1AdapterInsertion,
            metric_name: "error %".into(),
            categories: vec!["disk".into()],
            cells: vec![
                (
                    CellKey {
                        category: "disk".into(),
                        strategy: Strategy::BackDistill,
                        samples: 0,
                        depth: 1,
                    },
                    CellOutcome::Metric {
                        per_seed: vec![1.0, 2.0, 3.0],
                        mean: 2.0,
                    },
                ),
                (
                    CellKey {
                        category: "disk".into(),
                        strategy: Strategy::DirectLearn,
                        samples: 0,
                        depth: 1,
                    },
                    CellOutcome::Skipped { reason: "—".into() },
                ),
            ],
        };
        let path = std::env::temp_dir().join(format!("grid-{}.json", std::process::id()));
        grid.save_json(&path).unwrap();
        let back = ResultGrid::load_json(&path).unwrap();
        assert_eq!(grid, back);
        std::fs::remove_file(&path).unwrap();
    }
}
