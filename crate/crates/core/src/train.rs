//! Adapter training. Three strategies, all updating adapter parameters only:
//!
//! - `back-distill`: the gradient-matching distillation term from
//!   [`crate::backback`], plus the ordinary task loss when labeled samples
//!   are available. Admits the zero-sample regime, where no image is ever
//!   read.
//! - `direct-learn`: the task loss alone; needs at least one labeled sample
//!   and never builds a backward graph.
//! - `distill`: cross-entropy between student and teacher outputs on input
//!   images (soft targets). Needs images. For single-logit-pair
//!   classification heads this baseline carries little signal and is flagged
//!   as reference-only in the log.
//!
//! Category and task modules are frozen; the trainer hashes them before and
//! after the run and fails hard if anything changed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backback::{
    build_graph, distill_loss_and_grad, random_seeds, AlphaMode, LinearPseudoMap,
};
use crate::error::{Error, Result};
use crate::graph::{ComposedPath, GradScope, NetModule, TeacherNet, TransplantNet};
use crate::layers::{LayerParams, LayerSpec, PseudoRules};
use crate::parallel::par_map;
use crate::tensor::{Element, Rng, Shape, Tensor};

pub use crate::backback::AlphaMode as Alpha;

/// Learning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    BackDistill,
    DirectLearn,
    Distill,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::BackDistill => write!(f, "back-distill"),
            Strategy::DirectLearn => write!(f, "direct-learn"),
            Strategy::Distill => write!(f, "distill"),
        }
    }
}

/// First-order optimizer and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Full configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Weight of the distillation term; must be >= 0.
    pub lambda: f64,
    pub alpha_mode: AlphaMode,
    /// Seeds per optimization step (back-distill only).
    pub seeds_per_step: usize,
    /// Number of distinct labeled samples; 0 is the zero-sample regime.
    pub samples: usize,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pseudo_rules: PseudoRules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::BackDistill,
            lambda: 1.0,
            alpha_mode: AlphaMode::Ls,
            seeds_per_step: 8,
            samples: 0,
            optimizer: Optimizer::default(),
            steps: 2000,
            batch_size: 16,
            seed: 0,
            pseudo_rules: PseudoRules::default(),
        }
    }
}

/// Distillation weight used when no config overrides it: 1 in the zero-sample
/// regime (the task term is absent), 10 with labels so both terms start at
/// the same order of magnitude on the synthetic tasks.
pub fn default_lambda(samples: usize) -> f64 {
    if samples == 0 {
        1.0
    } else {
        10.0
    }
}

impl TrainConfig {
    /// Strategy-specific defaults for a given sample budget.
    pub fn for_strategy(strategy: Strategy, samples: usize, seed: u64) -> Self {
        TrainConfig {
            strategy,
            samples,
            seed,
            lambda: default_lambda(samples),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        match self.strategy {
            Strategy::DirectLearn | Strategy::Distill if self.samples == 0 => {
                Err(Error::Config(format!(
                    "strategy {} requires at least one labeled sample",
                    self.strategy
                )))
            }
            Strategy::BackDistill if self.seeds_per_step == 0 => {
                Err(Error::Config("back-distill needs seeds_per_step >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth labels for a sample collection.
#[derive(Debug, Clone)]
pub enum Labels<E: Element> {
    Classes(Vec<usize>),
    Masks(Vec<Tensor<E>>),
}

impl<E: Element> Labels<E> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Masks(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> LabelRef<'_, E> {
        match self {
            Labels::Classes(v) => LabelRef::Class(v[i]),
            Labels::Masks(v) => LabelRef::Mask(&v[i]),
        }
    }
}

/// Borrowed view of one label.
#[derive(Debug, Clone, Copy)]
pub enum LabelRef<'a, E: Element> {
    Class(usize),
    Mask(&'a Tensor<E>),
}

/// A fixed collection of labeled samples, reused across epochs.
#[derive(Debug, Clone)]
pub struct SampleSet<E: Element> {
    images: Vec<Tensor<E>>,
    labels: Labels<E>,
}

impl<E: Element> SampleSet<E> {
    pub fn new(images: Vec<Tensor<E>>, labels: Labels<E>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(SampleSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<E>] {
        &self.images
    }

    pub fn label(&self, i: usize) -> LabelRef<'_, E> {
        self.labels.get(i)
    }

    /// Stacks the selected samples into one batch with a leading batch
    /// extent.
    pub fn gather(&self, indices: &[usize]) -> Result<LabeledBatch<E>> {
        let images: Vec<&Tensor<E>> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = match &self.labels {
            Labels::Classes(v) => Labels::Classes(indices.iter().map(|&i| v[i]).collect()),
            Labels::Masks(v) => Labels::Masks(indices.iter().map(|&i| v[i].clone()).collect()),
        };
        LabeledBatch::stack(&images, labels)
    }
}

/// A batch of images with a leading batch extent, plus aligned labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch<E: Element> {
    pub images: Tensor<E>,
    pub labels: Labels<E>,
    sample_shape: Shape,
}

impl<E: Element> LabeledBatch<E> {
    pub fn stack(images: &[&Tensor<E>], labels: Labels<E>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "batch extents disagree: {} images, {} labels",
                images.len(),
                labels.len()
            )));
        }
        let sample_shape = images[0].shape().clone();
        let mut dims = vec![images.len()];
        dims.extend_from_slice(sample_shape.dims());
        let batch_shape = Shape::new(dims);
        let mut data = Vec::with_capacity(batch_shape.count());
        for img in images {
            if img.shape() != &sample_shape {
                return Err(Error::ShapeMismatch {
                    op: "batch stack",
                    expected: sample_shape.to_string(),
                    got: img.shape().to_string(),
                });
            }
            data.extend_from_slice(img.data());
        }
        Ok(LabeledBatch {
            images: Tensor::from_vec(&batch_shape, data)?,
            labels,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor<E> {
        let n = self.sample_shape.count();
        let slice = &self.images.data()[i * n..(i + 1) * n];
        Tensor::from_fn(&self.sample_shape, |j| slice[j])
    }

    pub fn label(&self, i: usize) -> LabelRef<'_, E> {
        self.labels.get(i)
    }
}

const PROB_FLOOR: f64 = 1e-7;

/// Task loss at the network output: softmax cross-entropy over class logits,
/// or per-pixel binary cross-entropy on sigmoid outputs. Returns the scalar
/// loss and its exact gradient at the output.
pub fn task_loss<E: Element>(output: &Tensor<E>, label: LabelRef<'_, E>) -> Result<(f64, Tensor<E>)> {
    match label {
        LabelRef::Class(idx) => {
            let n = output.len();
            if idx >= n {
                return Err(Error::Config(format!(
                    "class label {idx} out of range for {n} logits"
                )));
            }
            let m = output
                .data()
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = output.data().iter().map(|v| (v.to_f64() - m).exp()).sum();
            let loss = m + sum_exp.ln() - output.data()[idx].to_f64();
            let grad = Tensor::from_fn(output.shape(), |i| {
                let p = (output.data()[i].to_f64() - m).exp() / sum_exp;
                E::from_f64(p - if i == idx { 1.0 } else { 0.0 })
            });
            Ok((loss, grad))
        }
        LabelRef::Mask(mask) => {
            if mask.shape() != output.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mask loss",
                    expected: output.shape().to_string(),
                    got: mask.shape().to_string(),
                });
            }
            soft_bce(output, mask)
        }
    }
}

/// Binary cross-entropy of probabilities `y` against targets `q` (hard masks
/// or teacher soft labels), averaged over elements.
fn soft_bce<E: Element>(y: &Tensor<E>, q: &Tensor<E>) -> Result<(f64, Tensor<E>)> {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let grad = Tensor::from_fn(y.shape(), |i| {
        let yi = y.data()[i].to_f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let qi = q.data()[i].to_f64();
        loss -= qi * yi.ln() + (1.0 - qi) * (1.0 - yi).ln();
        E::from_f64((-qi / yi + (1.0 - qi) / (1.0 - yi)) / n)
    });
    Ok((loss / n, grad))
}

/// Output head of a task module, decided by its last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Logits,
    SigmoidProbs,
}

pub fn output_head(task: &[LayerSpec]) -> OutputHead {
    match task.last() {
        Some(LayerSpec::SigmoidHead) => OutputHead::SigmoidProbs,
        _ => OutputHead::Logits,
    }
}

/// Cross-entropy between student output and (frozen) teacher output: soft
/// softmax targets for logit heads, per-pixel soft BCE for sigmoid heads.
pub fn distill_output_loss<E: Element>(
    student: &Tensor<E>,
    teacher: &Tensor<E>,
    head: OutputHead,
) -> Result<(f64, Tensor<E>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            op: "output distillation",
            expected: student.shape().to_string(),
            got: teacher.shape().to_string(),
        });
    }
    match head {
        OutputHead::Logits => {
            let mt = teacher
                .data()
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let tsum: f64 = teacher.data().iter().map(|v| (v.to_f64() - mt).exp()).sum();
            let q: Vec<f64> = teacher
                .data()
                .iter()
                .map(|v| (v.to_f64() - mt).exp() / tsum)
                .collect();
            let ms = student
                .data()
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let ssum: f64 = student.data().iter().map(|v| (v.to_f64() - ms).exp()).sum();
            let lse = ms + ssum.ln();
            let mut loss = 0.0;
            for (i, qi) in q.iter().enumerate() {
                loss += qi * (lse - student.data()[i].to_f64());
            }
            let grad = Tensor::from_fn(student.shape(), |i| {
                let p = (student.data()[i].to_f64() - ms).exp() / ssum;
                E::from_f64(p - q[i])
            });
            Ok((loss, grad))
        }
        OutputHead::SigmoidProbs => soft_bce(student, teacher),
    }
}

/// One log row per optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total_loss: f64,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// Full record of a training run.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// (module id, hex hash) for every frozen module, before training.
    pub frozen_pre: Vec<(String, String)>,
    /// Same modules after training; equal to `frozen_pre` by contract.
    pub frozen_post: Vec<(String, String)>,
    pub alpha_final: f64,
    pub notes: Vec<String>,
}

impl TrainLog {
    pub fn final_total_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.total_loss)
    }

    /// Append-only CSV: step, total-loss, task-loss, distill-loss, alpha,
    /// grad-norm.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,total-loss,task-loss,distill-loss,alpha,grad-norm")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.step, r.total_loss, r.task_loss, r.distill_loss, r.alpha, r.grad_norm
            )?;
        }
        Ok(())
    }
}

/// Per-tensor optimizer slot.
#[derive(Debug, Clone)]
struct Slot<E: Element> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Optimizer state over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimState<E: Element> {
    t: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> OptimState<E> {
    pub fn for_shapes(shapes: &[Shape]) -> Self {
        OptimState {
            t: 0,
            slots: shapes
                .iter()
                .map(|s| Slot {
                    m: Tensor::zeros(s),
                    v: Tensor::zeros(s),
                })
                .collect(),
        }
    }
}

/// One optimizer step over aligned parameter/gradient lists. Deterministic
/// given state; rejects non-finite gradients.
pub fn optimizer_step<E: Element>(
    opt: &Optimizer,
    state: &mut OptimState<E>,
    mut params: Vec<&mut Tensor<E>>,
    grads: &[&Tensor<E>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::Config(format!(
            "optimizer given {} params, {} grads, {} slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for g in grads {
        g.check_finite("gradient")?;
    }
    state.t += 1;
    match *opt {
        Optimizer::Sgd { lr, momentum } => {
            let mu = E::from_f64(momentum);
            let neg_lr = E::from_f64(-lr);
            for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
                for i in 0..g.len() {
                    let m = slot.m.data()[i] * mu + g.data()[i];
                    slot.m.data_mut()[i] = m;
                    p.data_mut()[i] += neg_lr * m;
                }
            }
        }
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let b1 = E::from_f64(beta1);
            let b2 = E::from_f64(beta2);
            let one_m_b1 = E::from_f64(1.0 - beta1);
            let one_m_b2 = E::from_f64(1.0 - beta2);
            let c1 = E::from_f64(1.0 / (1.0 - beta1.powi(state.t as i32)));
            let c2 = E::from_f64(1.0 / (1.0 - beta2.powi(state.t as i32)));
            let neg_lr = E::from_f64(-lr);
            let eps = E::from_f64(eps);
            for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
                for i in 0..g.len() {
                    let gi = g.data()[i];
                    let m = slot.m.data()[i] * b1 + gi * one_m_b1;
                    let v = slot.v.data()[i] * b2 + gi * gi * one_m_b2;
                    slot.m.data_mut()[i] = m;
                    slot.v.data_mut()[i] = v;
                    let update = (m * c1) / ((v * c2).sqrt() + eps);
                    p.data_mut()[i] += neg_lr * update;
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn merge_grads<E: Element>(
    into: &mut Vec<Option<LayerParams<E>>>,
    from: Vec<Option<LayerParams<E>>>,
    scale: E,
) -> Result<()> {
    for (slot, g) in into.iter_mut().zip(from) {
        match (slot.as_mut(), g) {
            (Some(acc), Some(g)) => acc.add_scaled_inplace(scale, &g)?,
            (None, Some(g)) => {
                let mut acc = LayerParams {
                    weights: g.weights.as_ref().map(|w| Tensor::zeros(w.shape())),
                    bias: g.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
                };
                acc.add_scaled_inplace(scale, &g)?;
                *slot = Some(acc);
            }
            _ => {}
        }
    }
    Ok(())
}

fn grads_norm<E: Element>(grads: &[Option<LayerParams<E>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(LayerParams::norm_sq_f64)
        .sum::<f64>()
        .sqrt()
}

/// Deterministic epoch cycler over `n` sample indices.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    fn new(n: usize) -> Self {
        BatchCycler {
            order: (0..n).collect(),
            pos: n, // force a shuffle on first use
        }
    }

    fn next(&mut self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        if self.pos + batch > self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

/// Mean task loss and parameter gradients over a batch of junction features.
fn task_term<E: Element>(
    path: &ComposedPath<'_, E>,
    features: &[Tensor<E>],
    targets: &[TaskTarget<'_, E>],
    indices: &[usize],
) -> Result<(f64, Vec<Option<LayerParams<E>>>)> {
    let per_sample = par_map(indices, |&i| -> Result<_> {
        let (y, trace) = path.forward_upper(&features[i])?;
        let (loss, gy) = match targets[i] {
            TaskTarget::Label(l) => task_loss(&y, l)?,
            TaskTarget::SoftOutput(t, head) => distill_output_loss(&y, t, head)?,
        };
        let outcome = path.backward(&trace, &gy, GradScope::TrainableOnly, path.junction)?;
        Ok((loss, outcome.param_grads))
    });
    let inv = E::from_f64(1.0 / indices.len() as f64);
    let mut loss = 0.0;
    let mut grads: Vec<Option<LayerParams<E>>> = (0..path.layers.len()).map(|_| None).collect();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        merge_grads(&mut grads, g, inv)?;
    }
    Ok((loss / indices.len() as f64, grads))
}

enum TaskTarget<'a, E: Element> {
    Label(LabelRef<'a, E>),
    SoftOutput(&'a Tensor<E>, OutputHead),
}

/// Trains the adapter for `pair` = (category id, task id). The teacher and
/// every category/task module stay frozen; only adapter parameters (and the
/// alpha scalar in learnable mode) change. Returns the per-step log with
/// pre/post hashes of all frozen modules.
pub fn train_adapter<E: Element>(
    net: &mut TransplantNet<E>,
    teacher: &TeacherNet<E>,
    pair: (&str, &str),
    data: Option<&SampleSet<E>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let (cat_id, task_id) = pair;
    if !teacher.category.frozen() || !teacher.task.frozen() {
        return Err(Error::Config("teacher must be frozen before transplanting".into()));
    }
    match (cfg.samples, data) {
        (0, Some(_)) => {
            return Err(Error::Config(
                "zero-sample training must not be given a data stream".into(),
            ))
        }
        (n, None) if n > 0 => {
            return Err(Error::Config(format!("{n} samples requested but no data given")))
        }
        (n, Some(d)) if n > 0 && d.len() != n => {
            return Err(Error::Config(format!(
                "data stream supplies {} samples, config asks for exactly {n}",
                d.len()
            )))
        }
        _ => {}
    }

    let mut notes = Vec::new();
    let head = output_head(net.task(task_id)?.layers());
    if cfg.strategy == Strategy::Distill && head == OutputHead::Logits {
        notes.push(
            "distill baseline on a classification head is reference-only: \
             single-category logits carry little soft-label correlation"
                .to_string(),
        );
    }

    // Frozen audit, before.
    let mut frozen_pre = net.frozen_hashes();
    frozen_pre.push((
        format!("teacher:{}", teacher.category.id()),
        teacher.category.param_hash_hex(),
    ));
    frozen_pre.push((
        format!("teacher:{}", teacher.task.id()),
        teacher.task.param_hash_hex(),
    ));

    // Structural checks and adapter layout.
    let (junction, adapter_range, n_path_layers) = {
        let path = net.compose_path(cat_id, task_id)?;
        let adapter_len = net.adapter(cat_id, task_id)?.layers().len();
        let range = path.junction..path.junction + adapter_len;
        for i in path.trainable_indices() {
            if !range.contains(&i) {
                return Err(Error::FrozenViolated(format!(
                    "trainable layer {i} outside the adapter range {range:?}"
                )));
            }
        }
        if cfg.strategy != Strategy::DirectLearn {
            let t_out = teacher.task.output_shape();
            if t_out != path.output_shape() {
                return Err(Error::Junction {
                    from: teacher.task.id().to_string(),
                    to: task_id.to_string(),
                    reason: format!(
                        "teacher output {} != student output {}; shared seeds need equal shapes",
                        t_out,
                        path.output_shape()
                    ),
                });
            }
            if teacher.category.output_shape() != path.junction_shape() {
                return Err(Error::Junction {
                    from: teacher.category.id().to_string(),
                    to: cat_id.to_string(),
                    reason: "teacher and student junction shapes differ".into(),
                });
            }
        }
        (path.junction, range, path.layers.len())
    };

    // Junction feature cache: the category module is frozen, so features of
    // the fixed sample set never change across steps.
    let features: Vec<Tensor<E>> = match data {
        Some(d) => {
            let cat = net.category(cat_id)?;
            par_map(d.images(), |img| cat.forward(img).map(|(y, _)| y))
                .into_iter()
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    // Teacher outputs for the output-distillation baseline.
    let teacher_outputs: Vec<Tensor<E>> = if cfg.strategy == Strategy::Distill {
        let d = data.expect("validated above");
        let tpath = teacher.path();
        par_map(d.images(), |img| tpath.forward(img).map(|(y, _)| y))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    // The reified backward graph is structural and survives the whole run;
    // parameters are resolved live through the path at each evaluation. The
    // teacher is frozen, so its pseudo-backward pass is one fixed linear map
    // of the seed, cached once as a basis.
    let (graph, teacher_map) = if cfg.strategy == Strategy::BackDistill && cfg.lambda > 0.0 {
        (
            Some(build_graph(
                &net.compose_path(cat_id, task_id)?,
                &cfg.pseudo_rules,
            )?),
            Some(LinearPseudoMap::of_path(&teacher.path(), &cfg.pseudo_rules)?),
        )
    } else {
        (None, None)
    };

    // Optimizer over adapter tensors (weights+bias per parameterized layer),
    // plus the alpha scalar in learnable mode.
    let learnable_alpha = cfg.strategy == Strategy::BackDistill
        && cfg.alpha_mode == AlphaMode::Learnable
        && cfg.lambda > 0.0;
    let param_shapes: Vec<Shape> = {
        let adapter = net.adapter(cat_id, task_id)?;
        let mut shapes = Vec::new();
        for p in adapter.params() {
            if let Some(w) = &p.weights {
                shapes.push(w.shape().clone());
            }
            if let Some(b) = &p.bias {
                shapes.push(b.shape().clone());
            }
        }
        if learnable_alpha {
            shapes.push(Shape::new(vec![1]));
        }
        shapes
    };
    let mut optim = OptimState::for_shapes(&param_shapes);
    let mut alpha_param = Tensor::<E>::filled(&Shape::new(vec![1]), E::ONE);

    let mut seed_rng = Rng::for_stream(cfg.seed, "grad-seeds");
    let mut data_rng = Rng::for_stream(cfg.seed, "data-order");
    let mut next_seed_id: u64 = 0;
    let mut cycler = BatchCycler::new(cfg.samples);

    let mut rows: Vec<LogRow> = Vec::with_capacity(cfg.steps);
    let mut initial_total = f64::NAN;

    for step in 0..cfg.steps {
        let mut total_grads: Vec<Option<LayerParams<E>>> =
            (0..n_path_layers).map(|_| None).collect();
        let mut task_l = 0.0;
        let mut distill_l = 0.0;
        let mut alpha = 1.0;
        let mut alpha_grad = 0.0;

        // Task-side term.
        if cfg.samples > 0 || cfg.strategy != Strategy::BackDistill {
            let indices = cycler.next(cfg.batch_size, &mut data_rng);
            let d = data.expect("validated above");
            let targets: Vec<TaskTarget<'_, E>> = (0..d.len())
                .map(|i| match cfg.strategy {
                    Strategy::Distill => TaskTarget::SoftOutput(&teacher_outputs[i], head),
                    _ => TaskTarget::Label(d.label(i)),
                })
                .collect();
            let path = net.compose_path(cat_id, task_id)?;
            let (l, g) = task_term(&path, &features, &targets, &indices)?;
            task_l = l;
            merge_grads(&mut total_grads, g, E::ONE)?;
        }

        // Distillation term over a fresh seed batch.
        if let Some(graph) = &graph {
            let path = net.compose_path(cat_id, task_id)?;
            let seeds = random_seeds::<E>(
                path.output_shape(),
                cfg.seeds_per_step,
                &mut seed_rng,
                &mut next_seed_id,
            );
            let cached = teacher_map
                .as_ref()
                .expect("built alongside the graph")
                .grads_for(&seeds)?;
            let out = distill_loss_and_grad(
                graph,
                &path,
                &cached,
                &seeds,
                cfg.alpha_mode,
                learnable_alpha.then(|| alpha_param.data()[0].to_f64()),
                cfg.lambda,
            )?;
            distill_l = out.loss;
            alpha = out.alpha;
            alpha_grad = out.alpha_grad.unwrap_or(0.0);
            merge_grads(&mut total_grads, out.grads, E::ONE)?;
        }

        let total = task_l + distill_l;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if step == 0 {
            initial_total = total;
        } else if total > 100.0 * initial_total.max(1e-3) {
            return Err(Error::Diverged { step, loss: total });
        }

        let grad_norm =
            (grads_norm(&total_grads).powi(2) + alpha_grad * alpha_grad).sqrt();

        // Apply the update to adapter parameters only.
        {
            let adapter = net.adapter_mut(cat_id, task_id)?;
            let mut params: Vec<&mut Tensor<E>> = Vec::new();
            let mut grads: Vec<Tensor<E>> = Vec::new();
            for (li, p) in adapter.params_mut().iter_mut().enumerate() {
                let path_idx = junction + li;
                debug_assert!(adapter_range.contains(&path_idx));
                let g = total_grads[path_idx].take();
                if let Some(w) = p.weights.as_mut() {
                    grads.push(
                        g.as_ref()
                            .and_then(|g| g.weights.clone())
                            .unwrap_or_else(|| Tensor::zeros(w.shape())),
                    );
                    params.push(w);
                }
                if let Some(b) = p.bias.as_mut() {
                    grads.push(
                        g.as_ref()
                            .and_then(|g| g.bias.clone())
                            .unwrap_or_else(|| Tensor::zeros(b.shape())),
                    );
                    params.push(b);
                }
            }
            if learnable_alpha {
                grads.push(Tensor::from_vec(
                    &Shape::new(vec![1]),
                    vec![E::from_f64(alpha_grad)],
                )?);
                params.push(&mut alpha_param);
            }
            let grad_refs: Vec<&Tensor<E>> = grads.iter().collect();
            optimizer_step(&cfg.optimizer, &mut optim, params, &grad_refs)?;
        }

        rows.push(LogRow {
            step,
            total_loss: total,
            task_loss: task_l,
            distill_loss: distill_l,
            alpha,
            grad_norm,
        });
    }

    // Frozen audit, after.
    let mut frozen_post = net.frozen_hashes();
    frozen_post.push((
        format!("teacher:{}", teacher.category.id()),
        teacher.category.param_hash_hex(),
    ));
    frozen_post.push((
        format!("teacher:{}", teacher.task.id()),
        teacher.task.param_hash_hex(),
    ));
    if frozen_pre != frozen_post {
        return Err(Error::FrozenViolated(
            "frozen module hashes differ after training".into(),
        ));
    }

    let alpha_final = rows.last().map_or(1.0, |r| r.alpha);
    Ok(TrainLog {
        rows,
        frozen_pre,
        frozen_post,
        alpha_final,
        notes,
    })
}

/// Hex hashes of the adapter for `pair`; convenience for audits.
pub fn adapter_hash<E: Element>(net: &TransplantNet<E>, pair: (&str, &str)) -> Result<String> {
    Ok(net.adapter(pair.0, pair.1)?.param_hash_hex())
}

/// Forward a sample set through a full path, returning per-sample outputs.
pub fn forward_all<E: Element>(
    path: &ComposedPath<'_, E>,
    images: &[Tensor<E>],
) -> Result<Vec<Tensor<E>>> {
    par_map(images, |img| path.forward(img).map(|(y, _)| y))
        .into_iter()
        .collect()
}

/// Forward junction features through the upper part of a path.
pub fn forward_all_upper<E: Element>(
    path: &ComposedPath<'_, E>,
    features: &[Tensor<E>],
) -> Result<Vec<Tensor<E>>> {
    par_map(features, |x| path.forward_upper(x).map(|(y, _)| y))
        .into_iter()
        .collect()
}

/// Junction features of a sample set under a frozen category module.
pub fn junction_features<E: Element>(
    category: &NetModule<E>,
    images: &[Tensor<E>],
) -> Result<Vec<Tensor<E>>> {
    par_map(images, |img| category.forward(img).map(|(y, _)| y))
        .into_iter()
        .collect()
}
